use std::collections::BTreeMap;

use serde::Serialize;

use super::latency::Phase;
use crate::model::RequestId;

/// `(imbalance %, reduction potential %)` of per-instance samples.
///
/// Imbalance is `(max - mean) / mean`; reduction potential is
/// `(max - mean) / max`, the share of the maximum that perfect balance
/// would remove.
pub fn imbalance_metrics(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    from_max_mean(max, mean)
}

pub fn from_max_mean(max: f64, mean: f64) -> (f64, f64) {
    let spread = max - mean;
    let imbalance = if mean > 0.0 { spread / mean * 100.0 } else { 0.0 };
    let potential = if max > 0.0 { spread / max * 100.0 } else { 0.0 };
    (imbalance, potential)
}

/// Nearest-rank percentile, `q` in `[0, 1]`. Sorts in place.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub p50: f64,
    pub p99: f64,
    pub max: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let mut v = values.to_vec();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        Self {
            mean,
            p50: percentile(&mut v, 0.5),
            p99: percentile(&mut v, 0.99),
            max: *v.last().expect("non-empty"),
        }
    }
}

/// Imbalance of one per-instance quantity over a run: per-iteration maxima
/// and means are summed before taking the ratios, so long iterations weigh
/// more than short ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Imbalance {
    pub imbalance_pct: f64,
    pub reduction_potential_pct: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Finished,
    /// Cannot fit under the policy even on an idle cluster.
    Unschedulable,
    /// KV growth found no free frame in the binding.
    Evicted,
    /// Still queued or decoding when the run ended.
    Unfinished,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RequestRecord {
    pub id: RequestId,
    pub seq_len: u64,
    pub output_len: u32,
    pub arrival_ms: f64,
    pub admit_ms: Option<f64>,
    pub decode_start_ms: Option<f64>,
    pub finish_ms: Option<f64>,
    pub cp_degree: usize,
    pub outcome: Outcome,
}

impl RequestRecord {
    pub fn tpot_ms(&self) -> Option<f64> {
        match (self.outcome, self.decode_start_ms, self.finish_ms) {
            (Outcome::Finished, Some(s), Some(f)) => Some((f - s) / f64::from(self.output_len)),
            _ => None,
        }
    }

    /// End-to-end latency per output token, queueing included.
    pub fn normalized_latency_ms(&self) -> Option<f64> {
        self.finish_ms
            .filter(|_| self.outcome == Outcome::Finished)
            .map(|f| (f - self.arrival_ms) / f64::from(self.output_len))
    }
}

/// Per-iteration observations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationSample {
    pub start_ms: f64,
    pub latency_ms: f64,
    pub decoding: usize,
    /// Decoding requests with CP degree above one.
    pub multi_instance: usize,
    /// Per-layer maximum and mean over instances, µs.
    pub attn_max_us: f64,
    pub attn_mean_us: f64,
    pub moe_comm_max_us: f64,
    pub moe_comm_mean_us: f64,
    pub kv_max: f64,
    pub kv_mean: f64,
    pub batch_max: f64,
    pub batch_mean: f64,
    pub attn_rp_pct: f64,
    pub moe_comm_rp_pct: f64,
    pub kv_imbalance_pct: f64,
    pub batch_imbalance_pct: f64,
    pub attn_imbalance_pct: f64,
    pub moe_comm_imbalance_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunMetrics {
    pub requests: Vec<RequestRecord>,
    pub iterations: u64,
    pub tokens_decoded: u64,
    pub tpot_ms: Stats,
    pub slo_ms: f64,
    /// Requests meeting the TPOT target over all requests in the trace.
    pub attainment: f64,
    pub attention: Imbalance,
    pub moe_comm: Imbalance,
    pub kv_load: Imbalance,
    pub batch: Imbalance,
    pub hol_events: u64,
    pub cp_histogram: BTreeMap<usize, u64>,
    /// Mean per-layer phase durations, µs, of the busiest instance.
    pub slowest_breakdown: BTreeMap<Phase, f64>,
    pub samples: Vec<IterationSample>,
}

impl RunMetrics {
    pub fn empty(slo_ms: f64) -> Self {
        Self {
            requests: Vec::new(),
            iterations: 0,
            tokens_decoded: 0,
            tpot_ms: Stats::default(),
            slo_ms,
            attainment: 0.0,
            attention: Imbalance::default(),
            moe_comm: Imbalance::default(),
            kv_load: Imbalance::default(),
            batch: Imbalance::default(),
            hol_events: 0,
            cp_histogram: BTreeMap::new(),
            slowest_breakdown: BTreeMap::new(),
            samples: Vec::new(),
        }
    }

    pub fn count(&self, outcome: Outcome) -> usize {
        self.requests.iter().filter(|r| r.outcome == outcome).count()
    }

    /// Largest per-iteration share of decoding requests spread over more
    /// than one instance, over iterations with at least `min_decoding`
    /// decoding requests.
    pub fn max_multi_instance_fraction(&self, min_decoding: usize) -> f64 {
        self.samples
            .iter()
            .filter(|s| s.decoding >= min_decoding.max(1))
            .map(|s| s.multi_instance as f64 / s.decoding as f64)
            .fold(0.0, f64::max)
    }
}

impl Imbalance {
    pub fn aggregate<'a>(
        samples: impl IntoIterator<Item = &'a IterationSample>,
        f: impl Fn(&IterationSample) -> (f64, f64),
    ) -> Self {
        let (max, mean) = samples
            .into_iter()
            .map(f)
            .fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
        let (imbalance_pct, reduction_potential_pct) = from_max_mean(max, mean);
        Self {
            imbalance_pct,
            reduction_potential_pct,
        }
    }
}
