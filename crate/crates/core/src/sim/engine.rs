use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use super::latency::{LatencyModel, Phase};
use super::metrics::{imbalance_metrics, Imbalance, IterationSample, Outcome, RequestRecord, RunMetrics, Stats};
use super::timeline::{loads_from_placements, simulate_iteration};
use super::SimError;
use crate::model::{ClusterState, ClusterTopology, Request, RequestId, RequestState};
use crate::scheduler::{Scheduler, SchedulerPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub instances_per_node: usize,
    pub page_size: u32,
    /// KV capacity of one instance, tokens. Rounded down to whole pages.
    pub capacity_tokens: u64,
}

impl ClusterConfig {
    pub fn world_size(&self) -> usize {
        self.nodes * self.instances_per_node
    }

    pub fn capacity_pages(&self) -> Result<u32, SimError> {
        let pages = self.capacity_tokens / u64::from(self.page_size.max(1));
        u32::try_from(pages).map_err(|_| SimError::InvalidConfig("capacity exceeds u32 pages"))
    }

    pub fn build(&self) -> Result<ClusterState, SimError> {
        let topology = ClusterTopology::uniform(self.nodes, self.instances_per_node, self.page_size)?;
        let pages = self.capacity_pages()?;
        if pages == 0 {
            return Err(SimError::InvalidConfig("capacity must hold at least one page"));
        }
        Ok(ClusterState::new(topology, pages))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Decode iterations that reuse one scheduling decision.
    pub n_sched_steps: u32,
    /// A blocked queue head stops admission of everything behind it.
    pub hol_strict: bool,
    /// Time allowed after the last arrival before unfinished requests are
    /// counted as misses, seconds.
    pub drain_s: f64,
    pub slo_ms: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_sched_steps: 1,
            hol_strict: true,
            drain_s: 60.0,
            slo_ms: 50.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_sched_steps == 0 {
            return Err(SimError::InvalidConfig("n_sched_steps must be at least 1"));
        }
        if !(self.drain_s.is_finite() && self.drain_s >= 0.0) {
            return Err(SimError::InvalidConfig("drain_s must be non-negative"));
        }
        if !(self.slo_ms.is_finite() && self.slo_ms > 0.0) {
            return Err(SimError::InvalidConfig("slo_ms must be positive"));
        }
        Ok(())
    }
}

/// Runs a trace to completion (or to the drain deadline) under one policy.
///
/// Requests enter a global FIFO queue on arrival. Every `n_sched_steps`
/// iterations the scheduler admits what fits; admitted requests start
/// decoding after the migration delay. Each iteration appends one token per
/// decoding request and frees finished ones.
pub fn run_simulation(
    trace: &[Request],
    policy: &SchedulerPolicy,
    cluster_config: &ClusterConfig,
    model: &LatencyModel,
    sim: &SimConfig,
) -> Result<RunMetrics, SimError> {
    model.validate()?;
    sim.validate()?;
    let mut cluster = cluster_config.build()?;
    policy.validate(&cluster)?;
    for r in trace {
        r.validate()?;
    }
    let mut metrics = RunMetrics::empty(sim.slo_ms);
    if trace.is_empty() {
        return Ok(metrics);
    }

    let mut arrivals: Vec<&Request> = trace.iter().collect();
    arrivals.sort_by(|a, b| a.arrival_ms.total_cmp(&b.arrival_ms).then(a.id.cmp(&b.id)));
    let mut records: BTreeMap<RequestId, RequestRecord> = BTreeMap::new();
    for r in &arrivals {
        let rec = RequestRecord {
            id: r.id,
            seq_len: r.seq_len,
            output_len: r.output_len,
            arrival_ms: r.arrival_ms,
            admit_ms: None,
            decode_start_ms: None,
            finish_ms: None,
            cp_degree: 0,
            outcome: Outcome::Unfinished,
        };
        if records.insert(r.id, rec).is_some() {
            return Err(SimError::InvalidConfig("duplicate request id in trace"));
        }
    }
    let horizon = arrivals.last().map_or(0.0, |r| r.arrival_ms) + sim.drain_s * 1000.0;

    let world = cluster.world_size();
    let mut scheduler = Scheduler::new(policy.clone(), sim.hol_strict);
    let mut queue: VecDeque<Request> = VecDeque::new();
    let mut active: BTreeMap<RequestId, Request> = BTreeMap::new();
    let mut decode_start: BTreeMap<RequestId, f64> = BTreeMap::new();
    let mut next = 0;
    let mut now = 0.0_f64;
    let mut since_sched = 0u32;
    let mut breakdown = [0.0_f64; 9];

    loop {
        while next < arrivals.len() && arrivals[next].arrival_ms <= now {
            let mut r = arrivals[next].clone();
            r.state = RequestState::Waiting;
            r.placement = None;
            queue.push_back(r);
            next += 1;
        }
        if active.is_empty() && queue.is_empty() {
            match arrivals.get(next) {
                Some(r) => {
                    now = now.max(r.arrival_ms);
                    continue;
                }
                None => break,
            }
        }
        if now > horizon {
            break;
        }
        let idle = !decode_start.values().any(|&t| t <= now);
        if since_sched == 0 || idle {
            let outcome = scheduler.schedule_step(&mut queue, &mut active, &mut cluster);
            for (id, placement) in &outcome.committed {
                let rec = records.get_mut(id).expect("known request");
                rec.admit_ms = Some(now);
                rec.decode_start_ms = Some(now + model.migration_delay_ms);
                rec.cp_degree = placement.cp_degree();
                *metrics.cp_histogram.entry(placement.cp_degree()).or_insert(0) += 1;
                decode_start.insert(*id, now + model.migration_delay_ms);
            }
            for r in &outcome.unschedulable {
                records.get_mut(&r.id).expect("known request").outcome = Outcome::Unschedulable;
            }
            if outcome.blocked_head.is_some_and(|h| h.is_fragmentation()) {
                metrics.hol_events += 1;
            }
            since_sched = sim.n_sched_steps;
        }

        let decoding: Vec<RequestId> = active.keys().copied().filter(|id| decode_start[id] <= now).collect();
        if decoding.is_empty() {
            let next_start = decode_start
                .values()
                .copied()
                .filter(|&t| t > now)
                .fold(f64::INFINITY, f64::min);
            let next_arrival = arrivals.get(next).map_or(f64::INFINITY, |r| r.arrival_ms);
            let t = next_start.min(next_arrival);
            if !t.is_finite() {
                break;
            }
            now = t;
            continue;
        }

        let loads = loads_from_placements(
            decoding
                .iter()
                .map(|id| active[id].placement.as_ref().expect("active requests are placed")),
            world,
        );
        let timeline = simulate_iteration(&loads, model);
        let attn: Vec<f64> = (0..world).map(|i| timeline.duration(i, Phase::Attn)).collect();
        let comm: Vec<f64> = (0..world).map(|i| timeline.moe_comm(i)).collect();
        let kv: Vec<f64> = cluster.instances.iter().map(|s| s.kv_load as f64).collect();
        let batch: Vec<f64> = loads.iter().map(|l| f64::from(l.batch)).collect();
        let (attn_imb, attn_rp) = imbalance_metrics(&attn);
        let (comm_imb, comm_rp) = imbalance_metrics(&comm);
        let busiest = (0..world)
            .max_by(|&a, &b| timeline.busy(a).total_cmp(&timeline.busy(b)).then(b.cmp(&a)))
            .expect("non-empty cluster");
        for p in Phase::ALL {
            breakdown[p.index()] += timeline.duration(busiest, p);
        }
        let latency_ms = timeline.iteration_latency / 1000.0;
        metrics.samples.push(IterationSample {
            start_ms: now,
            latency_ms,
            decoding: decoding.len(),
            multi_instance: decoding
                .iter()
                .filter(|id| active[id].placement.as_ref().is_some_and(|p| p.cp_degree() > 1))
                .count(),
            attn_max_us: max_of(&attn),
            attn_mean_us: mean_of(&attn),
            moe_comm_max_us: max_of(&comm),
            moe_comm_mean_us: mean_of(&comm),
            kv_max: max_of(&kv),
            kv_mean: mean_of(&kv),
            batch_max: max_of(&batch),
            batch_mean: mean_of(&batch),
            attn_rp_pct: attn_rp,
            moe_comm_rp_pct: comm_rp,
            kv_imbalance_pct: imbalance_metrics(&kv).0,
            batch_imbalance_pct: imbalance_metrics(&batch).0,
            attn_imbalance_pct: attn_imb,
            moe_comm_imbalance_pct: comm_imb,
        });
        now += latency_ms;
        metrics.iterations += 1;
        since_sched = since_sched.saturating_sub(1);

        for id in decoding {
            let grown = cluster.append_token(id);
            let req = active.get_mut(&id).expect("decoding request is active");
            let rec = records.get_mut(&id).expect("known request");
            match grown {
                Ok(instance) => {
                    req.placement
                        .as_mut()
                        .expect("active requests are placed")
                        .add_tokens(instance, 1);
                    req.generated += 1;
                    metrics.tokens_decoded += 1;
                    if req.is_done() {
                        rec.finish_ms = Some(now);
                        rec.outcome = Outcome::Finished;
                    }
                }
                Err(_) => rec.outcome = Outcome::Evicted,
            }
            if rec.outcome != Outcome::Unfinished {
                cluster.free(id).expect("active requests own pages");
                active.remove(&id);
                decode_start.remove(&id);
            }
        }
    }

    metrics.requests = records.into_values().collect();
    let tpots: Vec<f64> = metrics.requests.iter().filter_map(RequestRecord::tpot_ms).collect();
    metrics.tpot_ms = Stats::of(&tpots);
    let met = tpots.iter().filter(|&&t| t <= sim.slo_ms).count();
    metrics.attainment = met as f64 / metrics.requests.len() as f64;
    let s = &metrics.samples;
    metrics.attention = Imbalance::aggregate(s, |x| (x.attn_max_us, x.attn_mean_us));
    metrics.moe_comm = Imbalance::aggregate(s, |x| (x.moe_comm_max_us, x.moe_comm_mean_us));
    metrics.kv_load = Imbalance::aggregate(s, |x| (x.kv_max, x.kv_mean));
    metrics.batch = Imbalance::aggregate(s, |x| (x.batch_max, x.batch_mean));
    if metrics.iterations > 0 {
        let n = metrics.iterations as f64;
        metrics.slowest_breakdown = Phase::ALL.iter().map(|&p| (p, breakdown[p.index()] / n)).collect();
    }
    Ok(metrics)
}

fn max_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
