//! Lock-step decode simulation and the metrics computed from it.

mod calibrate;
mod engine;
mod latency;
mod metrics;
mod sweep;
mod timeline;

use thiserror::Error;

pub use calibrate::{
    calibrate_bucket, candidate_degrees, default_length_grid, single_request_latency, BucketCalibration,
    CalibrationPoint,
};
pub use engine::{run_simulation, ClusterConfig, SimConfig};
pub use latency::{eval_phase_latency, Affine, AttnCoeffs, InstanceLoad, LatencyModel, Phase, RouteCoeffs};
pub use metrics::{
    from_max_mean, imbalance_metrics, percentile, Imbalance, IterationSample, Outcome, RequestRecord, RunMetrics, Stats,
};
pub use sweep::{slo_sweep, thread_cap_from_env, SweepPoint, SweepResult, ATTAINMENT_TARGET};
pub use timeline::{loads_from_placements, loads_from_routing, simulate_iteration, IterationTimeline, PhaseSpan};

use crate::model::ModelError;
use crate::scheduler::SchedulerError;
use crate::workload::WorkloadError;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("thread pool: {0}")]
    ThreadPool(String),
}
