use std::collections::BTreeSet;

use serde::Serialize;

use super::latency::{eval_phase_latency, InstanceLoad, LatencyModel, Phase};
use crate::model::Placement;
use crate::routing::{BindingConfig, RoutingTables};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct PhaseSpan {
    pub start: f64,
    pub finish: f64,
}

impl PhaseSpan {
    pub fn duration(&self) -> f64 {
        self.finish - self.start
    }
}

/// One layer of one decode iteration. Times are µs from the layer start.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTimeline {
    pub spans: Vec<[PhaseSpan; 9]>,
    /// Critical path of one layer.
    pub layer_latency: f64,
    /// `layers_per_iter * layer_latency` plus the fixed overhead.
    pub iteration_latency: f64,
    /// Per instance: idle time within one layer, waits and tail included.
    pub bubbles: Vec<f64>,
}

impl IterationTimeline {
    pub fn span(&self, instance: usize, phase: Phase) -> PhaseSpan {
        self.spans[instance][phase.index()]
    }

    pub fn duration(&self, instance: usize, phase: Phase) -> f64 {
        self.span(instance, phase).duration()
    }

    /// Sum of DS, DR, CS and CR durations on one instance.
    pub fn moe_comm(&self, instance: usize) -> f64 {
        [
            Phase::DispatchSend,
            Phase::DispatchRecv,
            Phase::CombineSend,
            Phase::CombineRecv,
        ]
        .iter()
        .map(|&p| self.duration(instance, p))
        .sum()
    }

    /// Busy time of one instance in the layer.
    pub fn busy(&self, instance: usize) -> f64 {
        self.spans[instance].iter().map(PhaseSpan::duration).sum()
    }

    pub fn world_size(&self) -> usize {
        self.spans.len()
    }
}

/// Per-instance loads for one iteration from the active placements.
pub fn loads_from_placements<'a>(
    placements: impl IntoIterator<Item = &'a Placement>,
    world_size: usize,
) -> Vec<InstanceLoad> {
    let mut loads = vec![InstanceLoad::default(); world_size];
    let mut query_from = vec![BTreeSet::new(); world_size];
    let mut partials_from = vec![BTreeSet::new(); world_size];
    for p in placements {
        let m = p.moe_binding().0;
        loads[m].batch += 1;
        let multi = p.cp_degree() > 1;
        if multi {
            loads[m].merge_partials += p.cp_degree() as u32;
        }
        for shard in p.shards() {
            let s = shard.instance.0;
            loads[s].shards += 1;
            loads[s].tokens += shard.tokens;
            if s != m {
                loads[m].query_msgs += 1;
                loads[s].partial_msgs += 1;
                query_from[s].insert(m);
                partials_from[m].insert(s);
            }
        }
    }
    for (l, (q, p)) in loads.iter_mut().zip(query_from.into_iter().zip(partials_from)) {
        l.query_from = q.into_iter().collect();
        l.partials_from = p.into_iter().collect();
    }
    loads
}

/// Same loads, read off binding configs and their routing tables.
pub fn loads_from_routing(configs: &[BindingConfig], tables: &[RoutingTables]) -> Vec<InstanceLoad> {
    configs
        .iter()
        .zip(tables)
        .map(|(c, t)| {
            let me = c.instance;
            let mut query_from = BTreeSet::new();
            for r in 0..t.q_route.row_count() {
                query_from.extend(t.q_route.columns(r).filter(|&s| s != me).map(|s| s.0));
            }
            let mut partials_from = BTreeSet::new();
            let mut merge_partials = 0;
            for r in 0..t.res_route.row_count() {
                let cols: Vec<_> = t.res_route.columns(r).collect();
                if cols.len() > 1 {
                    merge_partials += cols.len() as u32;
                }
                partials_from.extend(cols.into_iter().filter(|&s| s != me).map(|s| s.0));
            }
            InstanceLoad {
                shards: c.n() as u32,
                tokens: c.local_tokens(),
                batch: c.m() as u32,
                query_msgs: t.outbound_queries() as u32,
                partial_msgs: t.outbound_partials() as u32,
                merge_partials,
                query_from: query_from.into_iter().collect(),
                partials_from: partials_from.into_iter().collect(),
            }
        })
        .collect()
}

/// Lays out one layer on every instance.
///
/// Each instance runs QRoute, Attn, ResRoute, Merge, DS, DR, MLP, CS, CR in
/// order. Attention waits for inbound queries, merging waits for inbound
/// partials, DR waits for every DS and CR waits for every CS.
pub fn simulate_iteration(loads: &[InstanceLoad], model: &LatencyModel) -> IterationTimeline {
    let w = loads.len();
    let mut spans = vec![[PhaseSpan::default(); 9]; w];
    let cost = |i: usize, p: Phase| eval_phase_latency(model, p, &loads[i]);
    let run = |spans: &mut Vec<[PhaseSpan; 9]>, i: usize, p: Phase, ready: f64| {
        let prev = if p.index() == 0 {
            0.0
        } else {
            spans[i][p.index() - 1].finish
        };
        let start = prev.max(ready);
        spans[i][p.index()] = PhaseSpan {
            start,
            finish: start + cost(i, p),
        };
    };
    for i in 0..w {
        run(&mut spans, i, Phase::QRoute, 0.0);
    }
    for (i, load) in loads.iter().enumerate() {
        let ready = load
            .query_from
            .iter()
            .map(|&j| spans[j][Phase::QRoute.index()].finish)
            .fold(0.0, f64::max);
        run(&mut spans, i, Phase::Attn, ready);
        run(&mut spans, i, Phase::ResRoute, 0.0);
    }
    for (i, load) in loads.iter().enumerate() {
        let ready = load
            .partials_from
            .iter()
            .map(|&j| spans[j][Phase::ResRoute.index()].finish)
            .fold(0.0, f64::max);
        run(&mut spans, i, Phase::Merge, ready);
        run(&mut spans, i, Phase::DispatchSend, 0.0);
    }
    let barrier = |spans: &Vec<[PhaseSpan; 9]>, p: Phase| spans.iter().map(|s| s[p.index()].finish).fold(0.0, f64::max);
    let ds_done = barrier(&spans, Phase::DispatchSend);
    for i in 0..w {
        run(&mut spans, i, Phase::DispatchRecv, ds_done);
        run(&mut spans, i, Phase::Mlp, 0.0);
        run(&mut spans, i, Phase::CombineSend, 0.0);
    }
    let cs_done = barrier(&spans, Phase::CombineSend);
    for i in 0..w {
        run(&mut spans, i, Phase::CombineRecv, cs_done);
    }
    let layer_latency = barrier(&spans, Phase::CombineRecv);
    let bubbles = spans
        .iter()
        .map(|s| layer_latency - s.iter().map(PhaseSpan::duration).sum::<f64>())
        .collect();
    IterationTimeline {
        spans,
        layer_latency,
        iteration_latency: f64::from(model.layers_per_iter) * layer_latency + model.iteration_overhead_us,
        bubbles,
    }
}
