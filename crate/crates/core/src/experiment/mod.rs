//! Config-driven experiment runs: the layer behind the `dcpsim` binary.

pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attn::validate_merge;
use crate::scheduler::SchedulerPolicy;
use crate::sim::{
    calibrate_bucket, default_length_grid, run_simulation, slo_sweep, thread_cap_from_env, ClusterConfig, LatencyModel,
    SimConfig, SimError,
};
use crate::workload::{gen_trace, parse_trace_csv, TraceConfig, WorkloadError};
use crate::Request;

/// Largest relative error `validate-merge` accepts.
pub const MERGE_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Trace {
        path: PathBuf,
        #[source]
        source: WorkloadError,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("mode {0} needs a [trace] section")]
    MissingTrace(&'static str),
    #[error("no output directory: pass --out or set out_dir")]
    MissingOutDir,
    #[error("sweep needs a non-empty [sweep] rate_grid")]
    EmptyRateGrid,
    #[error("merge validation failed: max relative error {max_rel_err:e} is not below {MERGE_TOLERANCE:e}")]
    MergeTolerance { max_rel_err: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Simulate,
    Sweep,
    CalibrateBucket,
    ValidateMerge,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Sweep => "sweep",
            Mode::CalibrateBucket => "calibrate-bucket",
            Mode::ValidateMerge => "validate-merge",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simulate" => Ok(Mode::Simulate),
            "sweep" => Ok(Mode::Sweep),
            "calibrate-bucket" => Ok(Mode::CalibrateBucket),
            "validate-merge" => Ok(Mode::ValidateMerge),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Where the request trace comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum TraceSource {
    Generate(TraceConfig),
    /// CSV with `id,arrival_ms,seq_len,output_len`; relative paths resolve
    /// against the config file's directory.
    Replay {
        path: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub rate_grid: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrateSection {
    /// Longest length on the sweep grid, tokens.
    pub max_len: u64,
    /// Defaults to the cluster's instances per node.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_size: Option<usize>,
}

impl Default for CalibrateSection {
    fn default() -> Self {
        Self {
            max_len: 1 << 20,
            node_size: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeSection {
    pub cases: usize,
}

impl Default for MergeSection {
    fn default() -> Self {
        Self { cases: 1000 }
    }
}

fn default_policy() -> SchedulerPolicy {
    SchedulerPolicy::dcp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub mode: Mode,
    /// Overrides the trace seed; also seeds `validate-merge`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    pub cluster: ClusterConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceSource>,
    #[serde(default = "default_policy")]
    pub policy: SchedulerPolicy,
    #[serde(default)]
    pub latency: LatencyModel,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub calibrate: CalibrateSection,
    #[serde(default)]
    pub merge: MergeSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml_string(&self) -> Result<String, ExperimentError> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    /// Checks every sub-config that does not need a trace to check.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.latency.validate()?;
        self.sim.validate()?;
        let cluster = self.cluster.build()?;
        self.policy.validate(&cluster).map_err(SimError::from)?;
        if let Some(TraceSource::Generate(t)) = &self.trace {
            t.validate()?;
        }
        Ok(())
    }

    /// The generated-trace config with the top-level seed applied.
    fn trace_config(&self) -> Option<TraceConfig> {
        match &self.trace {
            Some(TraceSource::Generate(t)) => Some(TraceConfig {
                seed: self.seed.unwrap_or(t.seed),
                ..t.clone()
            }),
            _ => None,
        }
    }

    fn load_trace(&self, base_dir: &Path) -> Result<Vec<Request>, ExperimentError> {
        match &self.trace {
            None => Err(ExperimentError::MissingTrace(self.mode.as_str())),
            Some(TraceSource::Generate(_)) => Ok(gen_trace(&self.trace_config().expect("generated"))?),
            Some(TraceSource::Replay { path }) => {
                let path = base_dir.join(path);
                let text = fs::read_to_string(&path).map_err(|source| ExperimentError::Io {
                    path: path.clone(),
                    source,
                })?;
                parse_trace_csv(&text).map_err(|source| ExperimentError::Trace { path, source })
            }
        }
    }
}

/// What a run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub files: Vec<PathBuf>,
    /// Body of summary.txt without the header line.
    pub summary: String,
}

/// Runs `config` and writes its outputs into `out_dir`, falling back to the
/// config's `out_dir` (relative to `base_dir`).
pub fn run_experiment(
    config: &ExperimentConfig,
    base_dir: &Path,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput, ExperimentError> {
    let out = match (out_dir, &config.out_dir) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(p)) => base_dir.join(p),
        (None, None) => return Err(ExperimentError::MissingOutDir),
    };
    config.validate()?;
    fs::create_dir_all(&out).map_err(|source| ExperimentError::Io {
        path: out.clone(),
        source,
    })?;
    let mut writer = OutWriter {
        dir: out,
        files: Vec::new(),
    };

    let summary = match config.mode {
        Mode::Simulate => {
            let trace = config.load_trace(base_dir)?;
            let m = run_simulation(&trace, &config.policy, &config.cluster, &config.latency, &config.sim)?;
            let mut csv = Vec::new();
            report::write_requests_csv(&m.requests, &mut csv)?;
            writer.write("requests.csv", &csv)?;
            report::run_summary(&config.policy.name(), &m)
        }
        Mode::Sweep => {
            if config.sweep.rate_grid.is_empty() {
                return Err(ExperimentError::EmptyRateGrid);
            }
            let trace = config
                .trace_config()
                .ok_or(ExperimentError::MissingTrace("sweep with a generated trace"))?;
            let grid = &config.sweep.rate_grid;
            let sweep = slo_sweep(
                &trace,
                &config.policy,
                &config.cluster,
                &config.latency,
                &config.sim,
                grid,
                thread_cap_from_env(),
            )?;
            let mut csv = Vec::new();
            report::write_rates_csv(&sweep, &mut csv)?;
            writer.write("rates.csv", &csv)?;
            // per-request detail for the highest sustained rate, or the first rate if none held
            let rate = sweep.max_rate.unwrap_or(grid[0]);
            let at_rate = TraceConfig {
                arrival: trace.arrival.with_rate(rate),
                ..trace
            };
            let m = run_simulation(
                &gen_trace(&at_rate)?,
                &config.policy,
                &config.cluster,
                &config.latency,
                &config.sim,
            )?;
            let mut csv = Vec::new();
            report::write_requests_csv(&m.requests, &mut csv)?;
            writer.write("requests.csv", &csv)?;
            report::sweep_summary(&config.policy.name(), &sweep)
                + &format!("detail_rate = {}\n", report::sig6(rate))
                + &report::run_summary(&config.policy.name(), &m)
        }
        Mode::CalibrateBucket => {
            let node_size = config.calibrate.node_size.unwrap_or(config.cluster.instances_per_node);
            let grid = default_length_grid(config.calibrate.max_len);
            let cal = calibrate_bucket(&config.latency, node_size, &grid)?;
            let mut csv = Vec::new();
            report::write_calibration_csv(&cal, &mut csv)?;
            writer.write("calibration.csv", &csv)?;
            let table = PolicySnippet {
                policy: SchedulerPolicy::DualBalancedDcp {
                    buckets: cal.table.clone(),
                },
            };
            writer.write("bucket_table.toml", toml::to_string(&table)?.as_bytes())?;
            report::calibration_summary(&cal)
        }
        Mode::ValidateMerge => {
            let r = validate_merge(config.merge.cases, config.seed.unwrap_or(0));
            let summary = report::merge_summary(&r);
            writer.write_summary(config.mode, &summary)?;
            if r.max_rel_err >= MERGE_TOLERANCE || r.max_rel_err.is_nan() {
                return Err(ExperimentError::MergeTolerance {
                    max_rel_err: r.max_rel_err,
                });
            }
            return Ok(ExperimentOutput {
                files: writer.files,
                summary,
            });
        }
    };
    writer.write_summary(config.mode, &summary)?;
    Ok(ExperimentOutput {
        files: writer.files,
        summary,
    })
}

#[derive(Serialize)]
struct PolicySnippet {
    policy: SchedulerPolicy,
}

struct OutWriter {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl OutWriter {
    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), ExperimentError> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).map_err(|source| ExperimentError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }

    fn write_summary(&mut self, mode: Mode, body: &str) -> Result<(), ExperimentError> {
        let text = format!("{}\n{body}", report::header_line(mode.as_str()));
        self.write("summary.txt", text.as_bytes())
    }
}
