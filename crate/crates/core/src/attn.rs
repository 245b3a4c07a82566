//! Partial attention over KV shards and log-sum-exp merging.
//!
//! A single decode query attends to keys spread over several instances. Each
//! instance returns its softmax-normalised partial output together with the
//! log of its local softmax denominator; the MoE binding recombines them.
//! Matrices are row-major slices with one row per key.

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AttnError {
    #[error("shard has no keys")]
    EmptyShard,
    #[error("expected {expected} elements, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("nothing to merge")]
    NoPartials,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnShardResult<T> {
    pub partial_out: Vec<T>,
    /// `log sum_j exp(scale * k_j . q)` over the shard's keys.
    pub lse: T,
}

pub fn default_scale<T: Float>(head_size: usize) -> T {
    T::one() / T::from(head_size).expect("head size fits").sqrt()
}

fn rows<T>(q: &[T], keys: &[T], values: &[T]) -> Result<usize, AttnError> {
    let d = q.len();
    if d == 0 || !keys.len().is_multiple_of(d) {
        return Err(AttnError::DimensionMismatch {
            expected: d.max(1) * (keys.len() / d.max(1)),
            got: keys.len(),
        });
    }
    if values.len() != keys.len() {
        return Err(AttnError::DimensionMismatch {
            expected: keys.len(),
            got: values.len(),
        });
    }
    Ok(keys.len() / d)
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Stable softmax-weighted average of `values` plus the shifted denominator.
fn softmax_combine<T: Float>(q: &[T], keys: &[T], values: &[T], scale: T) -> Result<(Vec<T>, T, T), AttnError> {
    let l = rows(q, keys, values)?;
    if l == 0 {
        return Err(AttnError::EmptyShard);
    }
    let d = q.len();
    let scores: Vec<T> = keys.chunks_exact(d).map(|k| scale * dot(k, q)).collect();
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out = vec![T::zero(); d];
    let mut denom = T::zero();
    for (s, v) in scores.iter().zip(values.chunks_exact(d)) {
        let w = (*s - max).exp();
        denom = denom + w;
        for (o, &x) in out.iter_mut().zip(v) {
            *o = *o + w * x;
        }
    }
    for o in &mut out {
        *o = *o / denom;
    }
    Ok((out, max, denom))
}

/// Monolithic `softmax(scale * K q) V`.
pub fn reference_attention<T: Float>(q: &[T], keys: &[T], values: &[T], scale: T) -> Result<Vec<T>, AttnError> {
    softmax_combine(q, keys, values, scale).map(|(out, _, _)| out)
}

/// Attention restricted to one shard's keys.
pub fn shard_attention<T: Float>(q: &[T], keys: &[T], values: &[T], scale: T) -> Result<AttnShardResult<T>, AttnError> {
    let (partial_out, max, denom) = softmax_combine(q, keys, values, scale)?;
    Ok(AttnShardResult {
        partial_out,
        lse: max + denom.ln(),
    })
}

/// Combines partials into one result whose LSE covers the union of keys, so
/// merges can be folded incrementally.
pub fn merge_partials<T: Float>(partials: &[AttnShardResult<T>]) -> Result<AttnShardResult<T>, AttnError> {
    let first = partials.first().ok_or(AttnError::NoPartials)?;
    let d = first.partial_out.len();
    if let Some(p) = partials.iter().find(|p| p.partial_out.len() != d) {
        return Err(AttnError::DimensionMismatch {
            expected: d,
            got: p.partial_out.len(),
        });
    }
    let max = partials.iter().map(|p| p.lse).fold(T::neg_infinity(), T::max);
    let weights: Vec<T> = partials.iter().map(|p| (p.lse - max).exp()).collect();
    let total = weights.iter().fold(T::zero(), |a, &w| a + w);
    let mut out = vec![T::zero(); d];
    for (p, &w) in partials.iter().zip(&weights) {
        let w = w / total;
        for (o, &x) in out.iter_mut().zip(&p.partial_out) {
            *o = *o + w * x;
        }
    }
    Ok(AttnShardResult {
        partial_out: out,
        lse: max + total.ln(),
    })
}

pub fn lse_merge<T: Float>(partials: &[AttnShardResult<T>]) -> Result<Vec<T>, AttnError> {
    merge_partials(partials).map(|r| r.partial_out)
}

/// Runs shard attention over consecutive key ranges of `split` lengths and
/// merges the results. Zero-length shards receive no query.
pub fn distributed_attention<T: Float>(
    q: &[T],
    keys: &[T],
    values: &[T],
    split: &[usize],
    scale: T,
) -> Result<Vec<T>, AttnError> {
    let l = rows(q, keys, values)?;
    let total: usize = split.iter().sum();
    if total != l {
        return Err(AttnError::DimensionMismatch {
            expected: l,
            got: total,
        });
    }
    let d = q.len();
    let mut start = 0;
    let mut partials = Vec::with_capacity(split.len());
    for &len in split {
        if len > 0 {
            let range = start * d..(start + len) * d;
            partials.push(shard_attention(q, &keys[range.clone()], &values[range], scale)?);
        }
        start += len;
    }
    lse_merge(&partials)
}

pub fn relative_l2<A: Float, B: Float>(got: &[A], want: &[B]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&g, &w) in got.iter().zip(want) {
        let (g, w) = (g.to_f64().unwrap_or(f64::NAN), w.to_f64().unwrap_or(f64::NAN));
        num += (g - w) * (g - w);
        den += w * w;
    }
    if den == 0.0 {
        num.sqrt()
    } else {
        (num / den).sqrt()
    }
}

/// Outcome of [`validate_merge`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeReport {
    pub cases: usize,
    pub max_rel_err: f64,
}

/// Random shard-and-merge cases in single precision checked against the
/// double-precision monolithic reference.
pub fn validate_merge(cases: usize, seed: u64) -> MergeReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..cases {
        let case = MergeCase::random(&mut rng);
        max_rel_err = max_rel_err.max(case.error());
    }
    MergeReport { cases, max_rel_err }
}

/// One random attention instance with a random partition of its keys.
#[derive(Debug, Clone)]
pub struct MergeCase {
    pub q: Vec<f64>,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    /// Key indices per shard; every key appears in exactly one shard.
    pub shards: Vec<Vec<usize>>,
}

impl MergeCase {
    pub const HEAD_SIZES: [usize; 3] = [8, 16, 64];
    pub const SHARD_COUNTS: [usize; 4] = [1, 2, 4, 8];
    pub const MAX_KEYS: usize = 512;

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let d = Self::HEAD_SIZES[rng.random_range(0..Self::HEAD_SIZES.len())];
        let n_shards = Self::SHARD_COUNTS[rng.random_range(0..Self::SHARD_COUNTS.len())];
        let l = rng.random_range(n_shards..=Self::MAX_KEYS);
        let mut gen = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let q = gen(d);
        let keys = gen(l * d);
        let values = gen(l * d);
        let mut order: Vec<usize> = (0..l).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), rng);
        // every shard gets at least one key, the rest at random
        let mut shards: Vec<Vec<usize>> = order[..n_shards].iter().map(|&k| vec![k]).collect();
        for &k in &order[n_shards..] {
            shards[rng.random_range(0..n_shards)].push(k);
        }
        Self {
            q,
            keys,
            values,
            shards,
        }
    }

    /// Relative L2 error of the f32 shard-and-merge path against the f64
    /// monolithic reference.
    pub fn error(&self) -> f64 {
        let d = self.q.len();
        let want = reference_attention(&self.q, &self.keys, &self.values, default_scale(d)).expect("valid case");
        let q32: Vec<f32> = self.q.iter().map(|&x| x as f32).collect();
        let gather = |src: &[f64], idx: &[usize]| -> Vec<f32> {
            idx.iter()
                .flat_map(|&k| src[k * d..(k + 1) * d].iter().map(|&x| x as f32))
                .collect()
        };
        let partials: Vec<AttnShardResult<f32>> = self
            .shards
            .iter()
            .map(|idx| {
                shard_attention(
                    &q32,
                    &gather(&self.keys, idx),
                    &gather(&self.values, idx),
                    default_scale(d),
                )
                .expect("shards are non-empty")
            })
            .collect();
        let got = lse_merge(&partials).expect("at least one shard");
        relative_l2(&got, &want)
    }
}
