use serde::Serialize;

use super::latency::LatencyModel;
use super::timeline::{loads_from_placements, simulate_iteration};
use super::SimError;
use crate::model::{InstanceId, Placement, Shard};
use crate::scheduler::{water_fill, BucketFn};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CalibrationPoint {
    pub seq_len: u64,
    pub degree: u32,
    pub layer_latency_us: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketCalibration {
    pub table: BucketFn,
    pub points: Vec<CalibrationPoint>,
}

/// `2^j K` and `1.5 * 2^j K` for `K = 1024`, from 1K up to and including `max_len`.
pub fn default_length_grid(max_len: u64) -> Vec<u64> {
    let mut grid = Vec::new();
    let mut base = 1024u64;
    while base <= max_len {
        grid.push(base);
        let mid = base + base / 2;
        if mid <= max_len {
            grid.push(mid);
        }
        base *= 2;
    }
    grid
}

/// Degrees tried by the sweep: powers of two up to the node size.
pub fn candidate_degrees(node_size: usize) -> Vec<u32> {
    std::iter::successors(Some(1u32), |d| d.checked_mul(2))
        .take_while(|&d| d as usize <= node_size)
        .collect()
}

/// Per-layer latency of a single request spread over `degree` otherwise
/// idle instances of one node.
pub fn single_request_latency(model: &LatencyModel, seq_len: u64, degree: u32) -> f64 {
    let k = degree.max(1) as usize;
    let split = water_fill(&vec![0; k], seq_len);
    let shards = split
        .iter()
        .enumerate()
        .map(|(i, &tokens)| Shard {
            instance: InstanceId(i),
            tokens,
        })
        .collect();
    let p = Placement::new(InstanceId(0), shards).expect("distinct instances");
    let loads = loads_from_placements([&p], k);
    simulate_iteration(&loads, model).layer_latency
}

/// Sweeps `(length, degree)` over the latency model and keeps the fastest
/// degree per length. Ties go to the smaller degree, and the resulting
/// degree sequence is made non-decreasing so it forms a valid table.
pub fn calibrate_bucket(
    model: &LatencyModel,
    node_size: usize,
    lengths: &[u64],
) -> Result<BucketCalibration, SimError> {
    model.validate()?;
    if node_size == 0 {
        return Err(SimError::InvalidConfig("node size must be positive"));
    }
    if lengths.is_empty() || lengths.windows(2).any(|w| w[0] >= w[1]) || lengths[0] == 0 {
        return Err(SimError::InvalidConfig(
            "length grid must be positive and strictly ascending",
        ));
    }
    let degrees = candidate_degrees(node_size);
    let mut points = Vec::with_capacity(lengths.len() * degrees.len());
    let mut best = Vec::with_capacity(lengths.len());
    let mut floor = 1;
    for &len in lengths {
        let mut choice = (f64::INFINITY, 1);
        for &d in &degrees {
            let t = single_request_latency(model, len, d);
            points.push(CalibrationPoint {
                seq_len: len,
                degree: d,
                layer_latency_us: t,
            });
            if t < choice.0 {
                choice = (t, d);
            }
        }
        floor = floor.max(choice.1);
        best.push((len, floor));
    }
    let table = BucketFn::from_degrees(&best)?;
    Ok(BucketCalibration { table, points })
}
