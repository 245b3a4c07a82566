//! Request placement policies.
//!
//! [`SchedulerPolicy::DualBalancedDcp`] decouples each request's MoE binding
//! from its KV binding: the MoE binding balances per-instance batch sizes, the
//! KV binding (sized by a length bucket table) balances KV load through a
//! water-filled token split. The request-level baselines bind both to one
//! instance; the uniform-CP baseline spreads every request over a fixed group.

mod bucket;
mod water_fill;

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bucket::{cp_degree, BucketEntry, BucketFn};
pub use water_fill::water_fill;

use crate::model::{ClusterState, InstanceId, NodeId, Placement, Request, RequestId, RequestState, Shard};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("invalid bucket table: {0}")]
    InvalidBucketTable(&'static str),
    #[error("uniform CP degree {degree} does not divide node size {node_size}")]
    IndivisibleGroup { degree: usize, node_size: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchedulerPolicy {
    DualBalancedDcp {
        #[serde(default)]
        buckets: BucketFn,
    },
    LeastBatch,
    LeastCache,
    UniformCp {
        degree: usize,
    },
}

impl SchedulerPolicy {
    pub fn dcp() -> Self {
        Self::DualBalancedDcp {
            buckets: BucketFn::default_table(),
        }
    }

    pub fn name(&self) -> String {
        match self {
            Self::DualBalancedDcp { .. } => "dcp".into(),
            Self::LeastBatch => "least-batch".into(),
            Self::LeastCache => "least-cache".into(),
            Self::UniformCp { degree } => format!("uniform-cp{degree}"),
        }
    }

    /// Checks the policy against the cluster shape.
    pub fn validate(&self, cluster: &ClusterState) -> Result<(), SchedulerError> {
        if let Self::UniformCp { degree } = *self {
            for node in cluster.topology.nodes() {
                let node_size = cluster.topology.instances_of(node).len();
                if degree == 0 || !node_size.is_multiple_of(degree) {
                    return Err(SchedulerError::IndivisibleGroup { degree, node_size });
                }
            }
        }
        Ok(())
    }
}

/// True iff every shard fits in its instance's free frames. Pure.
pub fn can_allocate(shards: &[Shard], cluster: &ClusterState) -> bool {
    shards
        .iter()
        .all(|s| cluster.instances[s.instance.0].free_pages() >= cluster.topology.pages_for(s.tokens))
}

/// Reassigns MoE bindings of active requests without moving KV.
///
/// Requests with fewer KV-binding members have fewer choices and go first;
/// each takes the member with the smallest running batch count.
pub fn rebalance_active(active: &mut BTreeMap<RequestId, Request>, cluster: &mut ClusterState) {
    for inst in &mut cluster.instances {
        inst.moe_batch = 0;
    }
    let mut order: Vec<(usize, RequestId)> = active
        .values()
        .filter_map(|r| r.placement.as_ref().map(|p| (p.cp_degree(), r.id)))
        .collect();
    order.sort_unstable();
    for (_, id) in order {
        let placement = active
            .get_mut(&id)
            .and_then(|r| r.placement.as_mut())
            .expect("collected above");
        let target = argmin_by_key(placement.kv_binding(), |s| cluster.instances[s.0].moe_batch)
            .expect("placements are non-empty");
        placement
            .set_moe_binding(target)
            .expect("target drawn from the KV binding");
        cluster.instances[target.0].moe_batch += 1;
    }
}

/// Recounts `B_s` from the current MoE bindings.
pub fn recount_batches(active: &BTreeMap<RequestId, Request>, cluster: &mut ClusterState) {
    for inst in &mut cluster.instances {
        inst.moe_batch = 0;
    }
    for p in active.values().filter_map(|r| r.placement.as_ref()) {
        cluster.instances[p.moe_binding().0].moe_batch += 1;
    }
}

/// Lowest-keyed item; ties go to the earliest (lowest id when sorted).
fn argmin_by_key<T: Copy, K: Ord>(items: impl IntoIterator<Item = T>, mut key: impl FnMut(T) -> K) -> Option<T> {
    let mut best: Option<(K, T)> = None;
    for item in items {
        let k = key(item);
        if best.as_ref().is_none_or(|(bk, _)| k < *bk) {
            best = Some((k, item));
        }
    }
    best.map(|(_, t)| t)
}

/// Queue head that could not be placed in a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockedHead {
    pub request: RequestId,
    /// Whole pages the request needs, `ceil(len / page_size)`.
    pub demand_pages: u64,
    /// Free frames cluster-wide when the head was blocked.
    pub free_pages: u64,
}

impl BlockedHead {
    /// Blocked although the cluster as a whole had room for it.
    pub fn is_fragmentation(&self) -> bool {
        self.free_pages >= self.demand_pages
    }
}

#[derive(Debug, Clone, Default)]
pub struct StepOutcome {
    pub committed: Vec<(RequestId, Placement)>,
    pub deferred: Vec<RequestId>,
    /// Requests that cannot fit under this policy even on an idle cluster.
    pub unschedulable: Vec<Request>,
    pub blocked_head: Option<BlockedHead>,
}

/// Stateful scheduling actor. Calls must be serialized.
#[derive(Debug, Clone)]
pub struct Scheduler {
    policy: SchedulerPolicy,
    hol_strict: bool,
    /// Round-robin cursor per uniform-CP group.
    group_cursor: Vec<usize>,
}

impl Scheduler {
    pub fn new(policy: SchedulerPolicy, hol_strict: bool) -> Self {
        Self {
            policy,
            hol_strict,
            group_cursor: Vec::new(),
        }
    }

    pub fn policy(&self) -> &SchedulerPolicy {
        &self.policy
    }

    /// One scheduling round: rebalance (DCP only), then admit from the queue
    /// in FIFO order. Committed requests become active with pages allocated.
    pub fn schedule_step(
        &mut self,
        queue: &mut VecDeque<Request>,
        active: &mut BTreeMap<RequestId, Request>,
        cluster: &mut ClusterState,
    ) -> StepOutcome {
        match self.policy {
            SchedulerPolicy::DualBalancedDcp { .. } => rebalance_active(active, cluster),
            _ => recount_batches(active, cluster),
        }
        let mut outcome = StepOutcome::default();
        let mut remaining = VecDeque::with_capacity(queue.len());
        let mut blocked = false;
        while let Some(mut req) = queue.pop_front() {
            if blocked {
                outcome.deferred.push(req.id);
                remaining.push_back(req);
                continue;
            }
            if self.never_fits(&req, cluster) {
                outcome.unschedulable.push(req);
                continue;
            }
            match self.place(&req, cluster) {
                Some(placement) => {
                    cluster
                        .allocate(req.id, &placement)
                        .expect("can_allocate checked the same shards");
                    cluster.instances[placement.moe_binding().0].moe_batch += 1;
                    self.on_commit(&placement, cluster);
                    req.state = RequestState::Active;
                    req.placement = Some(placement.clone());
                    outcome.committed.push((req.id, placement));
                    active.insert(req.id, req);
                }
                None => {
                    if outcome.blocked_head.is_none() {
                        outcome.blocked_head = Some(BlockedHead {
                            request: req.id,
                            demand_pages: cluster.topology.pages_for(req.context_len()),
                            free_pages: cluster.total_free_pages(),
                        });
                    }
                    blocked = self.hol_strict;
                    outcome.deferred.push(req.id);
                    remaining.push_back(req);
                }
            }
        }
        *queue = remaining;
        outcome
    }

    /// Computes a feasible placement for `req`, or `None` to defer it.
    pub fn place(&self, req: &Request, cluster: &ClusterState) -> Option<Placement> {
        let len = req.context_len();
        let placement = match &self.policy {
            SchedulerPolicy::DualBalancedDcp { buckets } => dcp_placement(len, buckets, cluster),
            SchedulerPolicy::LeastBatch => {
                let s = argmin_by_key(cluster.instances.iter().map(|i| i.id), |s| {
                    cluster.instances[s.0].moe_batch
                })?;
                Placement::local(s, len)
            }
            SchedulerPolicy::LeastCache => {
                let s = argmin_by_key(cluster.instances.iter().map(|i| i.id), |s| {
                    cluster.instances[s.0].kv_load
                })?;
                Placement::local(s, len)
            }
            SchedulerPolicy::UniformCp { degree } => {
                let (gid, group) = self.pick_group(*degree, cluster);
                let cursor = self.group_cursor.get(gid).copied().unwrap_or(0);
                let moe = group[cursor % group.len()];
                let d = group.len() as u64;
                let shards = group
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| Shard {
                        instance: s,
                        tokens: len / d + u64::from((i as u64) < len % d),
                    })
                    .collect();
                Placement::new(moe, shards).expect("group members are distinct")
            }
        };
        can_allocate(placement.shards(), cluster).then_some(placement)
    }

    fn on_commit(&mut self, placement: &Placement, cluster: &ClusterState) {
        if let SchedulerPolicy::UniformCp { degree } = self.policy {
            let first = placement.shards()[0].instance;
            let gid = group_index(first, degree, cluster);
            if self.group_cursor.len() <= gid {
                self.group_cursor.resize(gid + 1, 0);
            }
            self.group_cursor[gid] += 1;
        }
    }

    fn pick_group(&self, degree: usize, cluster: &ClusterState) -> (usize, Vec<InstanceId>) {
        let groups = uniform_groups(degree, cluster);
        let (gid, group) = groups
            .into_iter()
            .enumerate()
            .min_by_key(|(i, g)| {
                let owned: u64 = g.iter().map(|s| u64::from(cluster.instances[s.0].moe_batch)).sum();
                (owned, *i)
            })
            .expect("cluster has at least one group");
        (gid, group)
    }

    /// Whether the request exceeds what this policy could place on an idle
    /// cluster.
    fn never_fits(&self, req: &Request, cluster: &ClusterState) -> bool {
        let topo = &cluster.topology;
        let cap = cluster
            .instances
            .iter()
            .map(|i| u64::from(i.capacity_pages))
            .max()
            .unwrap_or(0);
        let len = req.context_len();
        let widest = match &self.policy {
            SchedulerPolicy::DualBalancedDcp { buckets } => {
                let largest = topo.nodes().map(|n| topo.instances_of(n).len()).max().unwrap_or(1);
                cp_degree(len, buckets, largest) as u64
            }
            SchedulerPolicy::UniformCp { degree } => *degree as u64,
            _ => 1,
        };
        topo.pages_for(len.div_ceil(widest)) > cap
    }
}

fn dcp_placement(len: u64, buckets: &BucketFn, cluster: &ClusterState) -> Placement {
    let topo = &cluster.topology;
    let node: NodeId = argmin_by_key(topo.nodes(), |n| cluster.node_batch(n)).expect("non-empty");
    let members = topo.instances_of(node);
    let k = cp_degree(len, buckets, members.len());
    let moe = argmin_by_key(members.iter().copied(), |s| cluster.instances[s.0].moe_batch).expect("node has instances");
    let mut others: Vec<InstanceId> = members.iter().copied().filter(|&s| s != moe).collect();
    others.sort_by_key(|s| (cluster.instances[s.0].kv_load, *s));
    others.truncate(k - 1);
    let binding: Vec<InstanceId> = std::iter::once(moe).chain(others).collect();
    let loads: Vec<u64> = binding.iter().map(|s| cluster.instances[s.0].kv_load).collect();
    let split = water_fill(&loads, len);
    let shards = binding
        .into_iter()
        .zip(split)
        .map(|(instance, tokens)| Shard { instance, tokens })
        .collect();
    Placement::new(moe, shards).expect("binding starts with the MoE binding")
}

/// Fixed CP groups: each node's instances chunked into runs of `degree`.
pub fn uniform_groups(degree: usize, cluster: &ClusterState) -> Vec<Vec<InstanceId>> {
    cluster
        .topology
        .nodes()
        .flat_map(|n| {
            cluster
                .topology
                .instances_of(n)
                .chunks(degree.max(1))
                .map(<[InstanceId]>::to_vec)
                .collect::<Vec<_>>()
        })
        .collect()
}

fn group_index(first: InstanceId, degree: usize, cluster: &ClusterState) -> usize {
    uniform_groups(degree, cluster)
        .iter()
        .position(|g| g[0] == first)
        .expect("placement starts at a group head")
}
