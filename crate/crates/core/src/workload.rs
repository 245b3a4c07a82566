//! Synthetic decode traces mixing a short-context and a long-context length
//! distribution, plus CSV trace replay.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Request, RequestId};

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid length distribution {name}: {reason}")]
    InvalidDistribution { name: String, reason: String },
    #[error("invalid trace config: {0}")]
    InvalidConfig(&'static str),
    #[error("malformed trace at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Half-open token interval `[lower, upper)` with its probability mass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lower: u64,
    pub upper: u64,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntraBucket {
    #[default]
    Uniform,
    LogUniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub name: String,
    pub buckets: Vec<LengthBucket>,
    #[serde(default)]
    pub sampling: IntraBucket,
}

const PROBABILITY_TOLERANCE: f64 = 1e-9;

impl LengthDistribution {
    /// Builds a distribution from interval masses given in percent, scaling
    /// them to sum to one (published tables are rounded).
    pub fn from_percentages(name: &str, rows: &[(u64, u64, f64)]) -> Result<Self, WorkloadError> {
        let total: f64 = rows.iter().map(|r| r.2).sum();
        let buckets = rows
            .iter()
            .map(|&(lower, upper, pct)| LengthBucket {
                lower,
                upper,
                probability: pct / total,
            })
            .collect();
        let dist = Self {
            name: name.to_string(),
            buckets,
            sampling: IntraBucket::Uniform,
        };
        dist.validate()?;
        Ok(dist)
    }

    /// ShareGPT-4o short-context mix: <1k, 1k-10k, 10k-100k.
    pub fn sharegpt_4o() -> Self {
        Self::from_percentages(
            "sharegpt-4o",
            &[(1, 1_000, 85.7), (1_000, 10_000, 10.7), (10_000, 100_000, 3.5)],
        )
        .expect("static table is valid")
    }

    /// GitHub-Issue long-context mix: 100k-500k, 500k-1M.
    pub fn github_issue() -> Self {
        Self::from_percentages(
            "github-issue",
            &[(100_000, 500_000, 65.06), (500_000, 1_000_000, 34.94)],
        )
        .expect("static table is valid")
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let invalid = |reason: String| WorkloadError::InvalidDistribution {
            name: self.name.clone(),
            reason,
        };
        if self.buckets.is_empty() {
            return Err(invalid("no buckets".into()));
        }
        let mut sorted: Vec<&LengthBucket> = self.buckets.iter().collect();
        sorted.sort_by_key(|b| b.lower);
        for b in &sorted {
            if b.lower == 0 || b.lower >= b.upper {
                return Err(invalid(format!("bad interval [{}, {})", b.lower, b.upper)));
            }
            if !(b.probability >= 0.0 && b.probability.is_finite()) {
                return Err(invalid("probabilities must be finite and non-negative".into()));
            }
        }
        if sorted.windows(2).any(|w| w[1].lower < w[0].upper) {
            return Err(invalid("buckets overlap".into()));
        }
        let total: f64 = self.buckets.iter().map(|b| b.probability).sum();
        if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
            return Err(invalid(format!("probabilities sum to {total}")));
        }
        Ok(())
    }

    /// Index of the bucket containing `len`, if any.
    pub fn bucket_of(&self, len: u64) -> Option<usize> {
        self.buckets.iter().position(|b| b.lower <= len && len < b.upper)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.buckets.last().expect("validated non-empty");
        for b in &self.buckets {
            acc += b.probability;
            if u < acc {
                chosen = b;
                break;
            }
        }
        match self.sampling {
            IntraBucket::Uniform => rng.random_range(chosen.lower..chosen.upper),
            IntraBucket::LogUniform => {
                let (lo, hi) = ((chosen.lower as f64).ln(), (chosen.upper as f64).ln());
                let x = (lo + rng.random::<f64>() * (hi - lo)).exp().floor() as u64;
                x.clamp(chosen.lower, chosen.upper - 1)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "rate", rename_all = "kebab-case")]
pub enum Arrival {
    /// Evenly spaced arrivals, requests per second.
    Constant(f64),
    /// Poisson process, requests per second.
    Poisson(f64),
}

impl Arrival {
    pub fn rate(&self) -> f64 {
        match *self {
            Arrival::Constant(r) | Arrival::Poisson(r) => r,
        }
    }

    pub fn with_rate(&self, rate: f64) -> Self {
        match self {
            Arrival::Constant(_) => Arrival::Constant(rate),
            Arrival::Poisson(_) => Arrival::Poisson(rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    #[serde(default = "LengthDistribution::sharegpt_4o")]
    pub short_dist: LengthDistribution,
    #[serde(default = "LengthDistribution::github_issue")]
    pub long_dist: LengthDistribution,
    pub long_ratio: f64,
    pub arrival: Arrival,
    pub duration_s: f64,
    /// Inclusive range of decode steps per request.
    #[serde(default = "default_output_len")]
    pub output_len: (u32, u32),
    #[serde(default)]
    pub seed: u64,
}

fn default_output_len() -> (u32, u32) {
    (64, 512)
}

impl TraceConfig {
    /// ShareGPT-4o mixed with GitHub-Issue at `long_ratio`.
    pub fn mixed(long_ratio: f64, arrival: Arrival, duration_s: f64, seed: u64) -> Self {
        Self {
            short_dist: LengthDistribution::sharegpt_4o(),
            long_dist: LengthDistribution::github_issue(),
            long_ratio,
            arrival,
            duration_s,
            output_len: default_output_len(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        self.short_dist.validate()?;
        self.long_dist.validate()?;
        if !(0.0..=1.0).contains(&self.long_ratio) {
            return Err(WorkloadError::InvalidConfig("long_ratio must lie in [0, 1]"));
        }
        let rate = self.arrival.rate();
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(WorkloadError::InvalidConfig("arrival rate must be positive"));
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(WorkloadError::InvalidConfig("duration must be positive"));
        }
        let (lo, hi) = self.output_len;
        if lo == 0 || lo > hi {
            return Err(WorkloadError::InvalidConfig(
                "output_len range must satisfy 1 <= min <= max",
            ));
        }
        Ok(())
    }
}

/// Generates a trace sorted by arrival time. Pure in `config`.
pub fn gen_trace(config: &TraceConfig) -> Result<Vec<Request>, WorkloadError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let horizon_ms = config.duration_s * 1000.0;
    let arrivals: Vec<f64> = match config.arrival {
        Arrival::Constant(rate) => {
            // i / rate < duration, guarding against round-off at the boundary
            let n = (config.duration_s * rate - 1e-9).ceil().max(0.0) as u64;
            (0..n).map(|i| i as f64 * 1000.0 / rate).collect()
        }
        Arrival::Poisson(rate) => {
            let gap = Exp::new(rate / 1000.0).expect("rate validated");
            let mut t = 0.0;
            let mut out = Vec::new();
            loop {
                t += gap.sample(&mut rng);
                if t >= horizon_ms {
                    break out;
                }
                out.push(t);
            }
        }
    };
    let (lo, hi) = config.output_len;
    Ok(arrivals
        .into_iter()
        .enumerate()
        .map(|(i, arrival_ms)| {
            let long = rng.random::<f64>() < config.long_ratio;
            let dist = if long { &config.long_dist } else { &config.short_dist };
            let seq_len = dist.sample(&mut rng);
            let output_len = rng.random_range(lo..=hi);
            Request::new(RequestId(i as u64), seq_len, arrival_ms, output_len)
        })
        .collect())
}

pub fn write_trace_csv<W: Write>(trace: &[Request], out: W) -> Result<(), WorkloadError> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| WorkloadError::Io(std::io::Error::other(e));
    w.write_record(["id", "arrival_ms", "seq_len", "output_len"])
        .map_err(io)?;
    for r in trace {
        w.write_record([
            r.id.0.to_string(),
            format!("{}", r.arrival_ms),
            r.seq_len.to_string(),
            r.output_len.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a replay trace (`id,arrival_ms,seq_len,output_len`). Rows may come
/// in any order; the result is sorted by arrival time, then id.
pub fn parse_trace_csv(text: &str) -> Result<Vec<Request>, WorkloadError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let malformed = |line: usize, reason: String| WorkloadError::Malformed { line, reason };
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?;
    if headers != vec!["id", "arrival_ms", "seq_len", "output_len"] {
        return Err(malformed(1, "expected header id,arrival_ms,seq_len,output_len".into()));
    }
    let mut trace = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != 4 {
            return Err(malformed(line, format!("expected 4 fields, got {}", record.len())));
        }
        let id: u64 = record[0]
            .trim()
            .parse()
            .map_err(|e| malformed(line, format!("id: {e}")))?;
        let arrival_ms: f64 = record[1]
            .trim()
            .parse()
            .map_err(|e| malformed(line, format!("arrival_ms: {e}")))?;
        let seq_len: u64 = record[2]
            .trim()
            .parse()
            .map_err(|e| malformed(line, format!("seq_len: {e}")))?;
        let output_len: u32 = record[3]
            .trim()
            .parse()
            .map_err(|e| malformed(line, format!("output_len: {e}")))?;
        if !(arrival_ms.is_finite() && arrival_ms >= 0.0) {
            return Err(malformed(line, "arrival_ms must be finite and non-negative".into()));
        }
        if seq_len == 0 || output_len == 0 {
            return Err(malformed(line, "seq_len and output_len must be positive".into()));
        }
        if !seen.insert(id) {
            return Err(malformed(line, format!("duplicate id {id}")));
        }
        trace.push(Request::new(RequestId(id), seq_len, arrival_ms, output_len));
    }
    trace.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.id.cmp(&b.id)));
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_distributions_are_valid() {
        let s = LengthDistribution::sharegpt_4o();
        assert_eq!(s.buckets.len(), 3);
        assert!((s.buckets[0].probability - 85.7 / 99.9).abs() < 1e-12);
        LengthDistribution::github_issue().validate().unwrap();
    }

    #[test]
    fn degenerate_bucket_always_returns_lower_bound() {
        let d = LengthDistribution::from_percentages("one", &[(100, 101, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..1000).all(|_| d.sample(&mut rng) == 100));
    }

    #[test]
    fn log_uniform_stays_in_bucket() {
        let mut d = LengthDistribution::github_issue();
        d.sampling = IntraBucket::LogUniform;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let x = d.sample(&mut rng);
            assert!((100_000..1_000_000).contains(&x));
        }
    }

    #[test]
    fn invalid_distributions_are_rejected() {
        let overlap = LengthDistribution {
            name: "x".into(),
            buckets: vec![
                LengthBucket {
                    lower: 1,
                    upper: 10,
                    probability: 0.5,
                },
                LengthBucket {
                    lower: 5,
                    upper: 20,
                    probability: 0.5,
                },
            ],
            sampling: IntraBucket::Uniform,
        };
        assert!(overlap.validate().is_err());
        let unnormalized = LengthDistribution {
            name: "y".into(),
            buckets: vec![LengthBucket {
                lower: 1,
                upper: 10,
                probability: 0.9,
            }],
            sampling: IntraBucket::Uniform,
        };
        assert!(unnormalized.validate().is_err());
    }

    #[test]
    fn constant_rate_is_evenly_spaced() {
        let trace = gen_trace(&TraceConfig::mixed(0.01, Arrival::Constant(10.0), 10.0, 1)).unwrap();
        assert_eq!(trace.len(), 100);
        for (i, r) in trace.iter().enumerate() {
            assert!((r.arrival_ms - 100.0 * i as f64).abs() < 1e-9);
            assert!((64..=512).contains(&r.output_len));
        }
    }

    #[test]
    fn poisson_trace_is_sorted_and_bounded() {
        let trace = gen_trace(&TraceConfig::mixed(0.05, Arrival::Poisson(50.0), 20.0, 9)).unwrap();
        assert!(trace.windows(2).all(|w| w[0].arrival_ms <= w[1].arrival_ms));
        assert!(trace.iter().all(|r| r.arrival_ms < 20_000.0));
        // 1000 expected arrivals
        assert!((800..1200).contains(&trace.len()));
    }

    #[test]
    fn invalid_trace_config() {
        let mut c = TraceConfig::mixed(0.01, Arrival::Constant(0.0), 1.0, 0);
        assert!(gen_trace(&c).is_err());
        c.arrival = Arrival::Constant(1.0);
        c.duration_s = 0.0;
        assert!(gen_trace(&c).is_err());
        c.duration_s = 1.0;
        c.long_ratio = 1.5;
        assert!(gen_trace(&c).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let trace = gen_trace(&TraceConfig::mixed(0.2, Arrival::Poisson(5.0), 10.0, 4)).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let parsed = parse_trace_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed, trace);
    }

    #[test]
    fn csv_parser_errors() {
        assert!(parse_trace_csv("id,arrival\n").is_err());
        let dup = "id,arrival_ms,seq_len,output_len\n1,0,5,5\n1,1,5,5\n";
        assert!(matches!(
            parse_trace_csv(dup),
            Err(WorkloadError::Malformed { line: 3, .. })
        ));
        assert!(parse_trace_csv("id,arrival_ms,seq_len,output_len\n1,NaN,5,5\n").is_err());
        assert!(parse_trace_csv("id,arrival_ms,seq_len,output_len\n1,0,0,5\n").is_err());
        let unsorted = "id,arrival_ms,seq_len,output_len\n2,5.5,10,3\n1,1,7,2\n";
        let t = parse_trace_csv(unsorted).unwrap();
        assert_eq!(t[0].id, RequestId(1));
    }
}
