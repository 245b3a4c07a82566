//! Domain types shared by the scheduler, the router and the simulator.
//!
//! A [`Request`] is a single decode-phase sequence. Once admitted it carries a
//! [`Placement`] that decouples where its MoE dispatch/combine runs (the MoE
//! binding) from where its KV cache lives (the KV binding, one shard per
//! instance). [`ClusterState`] holds the per-instance loads and the global page
//! table that maps each request's logical pages to physical frames.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::page_table::GlobalPageTable;

macro_rules! id_newtype {
    ($(#[$meta:meta])* $name:ident, $inner:ty, $prefix:literal) => {
        $(#[$meta])*
        #[derive(
            Debug, Default, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(
    /// Unique request identifier.
    RequestId, u64, "r"
);
id_newtype!(
    /// Global DP-instance identifier (`0..world_size`).
    InstanceId, usize, "i"
);
id_newtype!(
    /// Node identifier; instances on the same node share a fast interconnect.
    NodeId, usize, "n"
);
id_newtype!(
    /// Physical KV frame index, local to one instance.
    FrameId, u32, "f"
);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("placement has no KV shards")]
    EmptyBinding,
    #[error("instance {0} appears more than once in the KV binding")]
    DuplicateInstance(InstanceId),
    #[error("MoE binding {0} is not part of the KV binding")]
    MoeBindingOutsideKvBinding(InstanceId),
    #[error("invalid request {id}: {reason}")]
    InvalidRequest { id: RequestId, reason: &'static str },
    #[error("invalid topology: {0}")]
    InvalidTopology(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Waiting,
    Active,
    Finished,
}

/// One decode-phase request.
///
/// `seq_len` is the context length when the request enters decode. Every
/// decode step appends one token, so the live context is
/// [`context_len`](Self::context_len).
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub id: RequestId,
    pub seq_len: u64,
    pub arrival_ms: f64,
    pub output_len: u32,
    pub generated: u32,
    pub state: RequestState,
    pub placement: Option<Placement>,
}

impl Request {
    pub fn new(id: RequestId, seq_len: u64, arrival_ms: f64, output_len: u32) -> Self {
        Self {
            id,
            seq_len,
            arrival_ms,
            output_len,
            generated: 0,
            state: RequestState::Waiting,
            placement: None,
        }
    }

    pub fn context_len(&self) -> u64 {
        self.seq_len + u64::from(self.generated)
    }

    pub fn is_done(&self) -> bool {
        self.generated >= self.output_len
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let invalid = |reason| ModelError::InvalidRequest { id: self.id, reason };
        if self.seq_len == 0 {
            return Err(invalid("seq_len must be at least 1"));
        }
        if self.output_len == 0 {
            return Err(invalid("output_len must be at least 1"));
        }
        if self.generated > self.output_len {
            return Err(invalid("generated exceeds output_len"));
        }
        if (self.state == RequestState::Active) != self.placement.is_some() {
            return Err(invalid("placement must be present exactly when active"));
        }
        if let Some(p) = &self.placement {
            if p.total_tokens() != self.context_len() {
                return Err(invalid("split does not cover the context"));
            }
        }
        Ok(())
    }
}

/// Tokens of one request held by one instance of its KV binding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub instance: InstanceId,
    pub tokens: u64,
}

/// A request's decoupled bindings.
///
/// The shard order is the KV-binding iteration order; logical pages are laid
/// out across shards in this order. The MoE binding is always one of the
/// shard instances, possibly holding zero tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    moe_binding: InstanceId,
    shards: Vec<Shard>,
}

impl Placement {
    pub fn new(moe_binding: InstanceId, shards: Vec<Shard>) -> Result<Self, ModelError> {
        if shards.is_empty() {
            return Err(ModelError::EmptyBinding);
        }
        for (i, s) in shards.iter().enumerate() {
            if shards[..i].iter().any(|o| o.instance == s.instance) {
                return Err(ModelError::DuplicateInstance(s.instance));
            }
        }
        if !shards.iter().any(|s| s.instance == moe_binding) {
            return Err(ModelError::MoeBindingOutsideKvBinding(moe_binding));
        }
        Ok(Self { moe_binding, shards })
    }

    /// A CP-degree-1 placement: everything on one instance.
    pub fn local(instance: InstanceId, tokens: u64) -> Self {
        Self {
            moe_binding: instance,
            shards: vec![Shard { instance, tokens }],
        }
    }

    pub fn moe_binding(&self) -> InstanceId {
        self.moe_binding
    }

    /// Moves the MoE binding to another member of the KV binding. No KV moves.
    pub fn set_moe_binding(&mut self, instance: InstanceId) -> Result<(), ModelError> {
        if !self.contains(instance) {
            return Err(ModelError::MoeBindingOutsideKvBinding(instance));
        }
        self.moe_binding = instance;
        Ok(())
    }

    pub fn shards(&self) -> &[Shard] {
        &self.shards
    }

    pub fn kv_binding(&self) -> impl Iterator<Item = InstanceId> + '_ {
        self.shards.iter().map(|s| s.instance)
    }

    pub fn cp_degree(&self) -> usize {
        self.shards.len()
    }

    pub fn contains(&self, instance: InstanceId) -> bool {
        self.shards.iter().any(|s| s.instance == instance)
    }

    pub fn tokens_on(&self, instance: InstanceId) -> u64 {
        self.shards
            .iter()
            .find(|s| s.instance == instance)
            .map_or(0, |s| s.tokens)
    }

    pub fn total_tokens(&self) -> u64 {
        self.shards.iter().map(|s| s.tokens).sum()
    }

    pub(crate) fn add_tokens(&mut self, instance: InstanceId, tokens: u64) {
        let shard = self
            .shards
            .iter_mut()
            .find(|s| s.instance == instance)
            .expect("token growth outside the KV binding");
        shard.tokens += tokens;
    }
}

/// Static shape of the cluster: nodes, the instances on each node, page size.
///
/// Instance ids are assigned node-major, so node `n` of a uniform topology
/// owns instances `n*k .. (n+1)*k`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterTopology {
    node_instances: Vec<Vec<InstanceId>>,
    node_of: Vec<NodeId>,
    page_size: u32,
}

impl ClusterTopology {
    pub fn uniform(nodes: usize, instances_per_node: usize, page_size: u32) -> Result<Self, ModelError> {
        Self::from_node_sizes(&vec![instances_per_node; nodes], page_size)
    }

    pub fn from_node_sizes(sizes: &[usize], page_size: u32) -> Result<Self, ModelError> {
        if page_size == 0 {
            return Err(ModelError::InvalidTopology("page_size must be at least 1"));
        }
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(ModelError::InvalidTopology("every node needs at least one instance"));
        }
        let mut node_instances = Vec::with_capacity(sizes.len());
        let mut node_of = Vec::new();
        for (n, &size) in sizes.iter().enumerate() {
            let first = node_of.len();
            node_instances.push((first..first + size).map(InstanceId).collect());
            node_of.extend(std::iter::repeat_n(NodeId(n), size));
        }
        Ok(Self {
            node_instances,
            node_of,
            page_size,
        })
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.node_instances.len()).map(NodeId)
    }

    pub fn node_count(&self) -> usize {
        self.node_instances.len()
    }

    pub fn instances_of(&self, node: NodeId) -> &[InstanceId] {
        &self.node_instances[node.0]
    }

    pub fn node_of(&self, instance: InstanceId) -> NodeId {
        self.node_of[instance.0]
    }

    pub fn page_size(&self) -> u32 {
        self.page_size
    }

    /// Total number of instances (the routing-table width).
    pub fn world_size(&self) -> usize {
        self.node_of.len()
    }

    /// Smallest node size; uniform CP groups must fit every node.
    pub fn min_node_size(&self) -> usize {
        self.node_instances.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Frames needed to hold `tokens` whole pages.
    pub fn pages_for(&self, tokens: u64) -> u64 {
        tokens.div_ceil(u64::from(self.page_size))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceState {
    pub id: InstanceId,
    pub node: NodeId,
    /// Resident KV tokens.
    pub kv_load: u64,
    /// Active requests whose MoE binding is this instance.
    pub moe_batch: u32,
    pub capacity_pages: u32,
    pub free_frames: Vec<FrameId>,
    /// Request shards resident here, zero-token shards included.
    pub shard_count: u32,
}

impl InstanceState {
    fn new(id: InstanceId, node: NodeId, capacity_pages: u32) -> Self {
        Self {
            id,
            node,
            kv_load: 0,
            moe_batch: 0,
            capacity_pages,
            // popped from the back, so low frame ids go out first
            free_frames: (0..capacity_pages).rev().map(FrameId).collect(),
            shard_count: 0,
        }
    }

    pub fn free_pages(&self) -> u64 {
        self.free_frames.len() as u64
    }

    pub fn allocated_pages(&self) -> u64 {
        u64::from(self.capacity_pages) - self.free_pages()
    }
}

/// Mutable cluster-wide state owned by the scheduler thread.
#[derive(Debug, Clone)]
pub struct ClusterState {
    pub topology: ClusterTopology,
    pub instances: Vec<InstanceState>,
    pub page_table: GlobalPageTable,
}

impl ClusterState {
    pub fn new(topology: ClusterTopology, capacity_pages: u32) -> Self {
        let instances = (0..topology.world_size())
            .map(|i| InstanceState::new(InstanceId(i), topology.node_of(InstanceId(i)), capacity_pages))
            .collect();
        Self {
            topology,
            instances,
            page_table: GlobalPageTable::default(),
        }
    }

    pub fn instance(&self, id: InstanceId) -> &InstanceState {
        &self.instances[id.0]
    }

    pub fn world_size(&self) -> usize {
        self.instances.len()
    }

    pub fn total_free_pages(&self) -> u64 {
        self.instances.iter().map(InstanceState::free_pages).sum()
    }

    pub fn total_capacity_pages(&self) -> u64 {
        self.instances.iter().map(|s| u64::from(s.capacity_pages)).sum()
    }

    /// `B^(n)`: MoE-bound requests summed over a node's instances.
    pub fn node_batch(&self, node: NodeId) -> u64 {
        self.topology
            .instances_of(node)
            .iter()
            .map(|&s| u64::from(self.instances[s.0].moe_batch))
            .sum()
    }

    /// Per-instance capacity in tokens.
    pub fn capacity_tokens(&self) -> u64 {
        self.instances.first().map_or(0, |s| {
            u64::from(s.capacity_pages) * u64::from(self.topology.page_size())
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_requires_moe_binding_in_kv_binding() {
        let shards = vec![Shard {
            instance: InstanceId(0),
            tokens: 10,
        }];
        assert_eq!(
            Placement::new(InstanceId(1), shards.clone()),
            Err(ModelError::MoeBindingOutsideKvBinding(InstanceId(1)))
        );
        assert!(Placement::new(InstanceId(0), shards).is_ok());
        assert_eq!(Placement::new(InstanceId(0), vec![]), Err(ModelError::EmptyBinding));
    }

    #[test]
    fn placement_rejects_duplicates() {
        let s = Shard {
            instance: InstanceId(2),
            tokens: 1,
        };
        assert_eq!(
            Placement::new(InstanceId(2), vec![s, s]),
            Err(ModelError::DuplicateInstance(InstanceId(2)))
        );
    }

    #[test]
    fn zero_token_moe_binding_is_allowed() {
        let p = Placement::new(
            InstanceId(0),
            vec![
                Shard {
                    instance: InstanceId(0),
                    tokens: 0,
                },
                Shard {
                    instance: InstanceId(1),
                    tokens: 64,
                },
            ],
        )
        .unwrap();
        assert_eq!(p.cp_degree(), 2);
        assert_eq!(p.total_tokens(), 64);
        assert_eq!(p.tokens_on(InstanceId(0)), 0);
    }

    #[test]
    fn request_validation() {
        let mut r = Request::new(RequestId(1), 0, 0.0, 4);
        assert!(r.validate().is_err());
        r.seq_len = 8;
        assert!(r.validate().is_ok());
        r.state = RequestState::Active;
        assert!(r.validate().is_err());
        r.placement = Some(Placement::local(InstanceId(0), 8));
        assert!(r.validate().is_ok());
        r.generated = 5;
        assert!(r.validate().is_err());
    }

    #[test]
    fn uniform_topology_is_node_major() {
        let t = ClusterTopology::uniform(2, 4, 16).unwrap();
        assert_eq!(t.world_size(), 8);
        assert_eq!(
            t.instances_of(NodeId(1)),
            &[InstanceId(4), InstanceId(5), InstanceId(6), InstanceId(7)]
        );
        assert_eq!(t.node_of(InstanceId(3)), NodeId(0));
        assert_eq!(t.pages_for(17), 2);
        assert!(ClusterTopology::uniform(2, 4, 0).is_err());
    }
}
