//! Simulator and scheduling library for DP-EP MoE decode clusters with
//! dynamic context parallelism.

pub mod attn;
pub mod experiment;
pub mod model;
pub mod page_table;
pub mod routing;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use model::{
    ClusterState, ClusterTopology, FrameId, InstanceId, InstanceState, ModelError, NodeId, Placement, Request,
    RequestId, RequestState, Shard,
};
pub use page_table::{GlobalPageTable, PageEntry, PageTableError};
