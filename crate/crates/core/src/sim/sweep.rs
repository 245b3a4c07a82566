use rayon::prelude::*;
use serde::Serialize;

use super::engine::{run_simulation, ClusterConfig, SimConfig};
use super::latency::LatencyModel;
use super::SimError;
use crate::scheduler::SchedulerPolicy;
use crate::workload::{gen_trace, TraceConfig};

/// Share of requests that must meet the TPOT target.
pub const ATTAINMENT_TARGET: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub attainment: f64,
    pub tpot_p50_ms: f64,
    pub tpot_p99_ms: f64,
    pub requests: usize,
}

impl SweepPoint {
    pub fn sustained(&self) -> bool {
        self.attainment >= ATTAINMENT_TARGET
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    /// Evaluated points up to and including the first failure.
    pub points: Vec<SweepPoint>,
    /// Largest rate before the first failure; `None` if the first rate fails.
    pub max_rate: Option<f64>,
}

/// `DCPSIM_THREADS`, if set to a positive integer.
pub fn thread_cap_from_env() -> Option<usize> {
    std::env::var("DCPSIM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Finds the highest rate in `rate_grid` sustaining the attainment target.
///
/// Rates are evaluated in batches of `threads` in parallel; the sweep stops
/// at the first failing rate, so later rates never count even if they pass.
pub fn slo_sweep(
    trace_config: &TraceConfig,
    policy: &SchedulerPolicy,
    cluster: &ClusterConfig,
    model: &LatencyModel,
    sim: &SimConfig,
    rate_grid: &[f64],
    threads: Option<usize>,
) -> Result<SweepResult, SimError> {
    if rate_grid.windows(2).any(|w| w[0] >= w[1]) || rate_grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(SimError::InvalidConfig(
            "rate grid must be positive and strictly ascending",
        ));
    }
    let threads = threads.unwrap_or_else(rayon::current_num_threads).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    let eval = |rate: f64| -> Result<SweepPoint, SimError> {
        let cfg = TraceConfig {
            arrival: trace_config.arrival.with_rate(rate),
            ..trace_config.clone()
        };
        let trace = gen_trace(&cfg)?;
        let m = run_simulation(&trace, policy, cluster, model, sim)?;
        Ok(SweepPoint {
            rate,
            attainment: m.attainment,
            tpot_p50_ms: m.tpot_ms.p50,
            tpot_p99_ms: m.tpot_ms.p99,
            requests: m.requests.len(),
        })
    };
    let mut points = Vec::new();
    let mut max_rate = None;
    for chunk in rate_grid.chunks(threads) {
        let results: Vec<Result<SweepPoint, SimError>> = pool.install(|| chunk.par_iter().map(|&r| eval(r)).collect());
        for p in results {
            let p = p?;
            points.push(p);
            if !p.sustained() {
                return Ok(SweepResult { points, max_rate });
            }
            max_rate = Some(p.rate);
        }
    }
    Ok(SweepResult { points, max_rate })
}
