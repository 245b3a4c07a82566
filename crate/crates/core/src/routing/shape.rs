//! Static-shape buckets for per-instance execution graphs.
//!
//! Each instance's iteration shape is `(M, N)`: MoE-bound requests and
//! resident shards. Graphs are captured ahead of time for a fixed bucket list
//! and all of them alias one buffer pool sized for `(M_max, N_max)`.

use serde::{Deserialize, Serialize};

use super::RoutingError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeSpace {
    /// `(M_hat, N_hat)` pairs, sorted lexicographically.
    pub buckets: Vec<(u32, u32)>,
    pub m_max: u32,
    pub n_max: u32,
    /// Routing-table width.
    pub world_size: u32,
    pub heads: u32,
    pub head_size: u32,
    pub hidden: u32,
    /// Block-table width per request.
    pub max_blocks: u32,
    pub elem_bytes: u32,
    pub int_bytes: u32,
}

impl ShapeSpace {
    pub const DEFAULT_M: [u32; 6] = [8, 16, 32, 64, 128, 256];
    pub const DEFAULT_N: [u32; 8] = [8, 16, 32, 64, 128, 256, 384, 512];

    /// 6 x 8 grid over [`DEFAULT_M`](Self::DEFAULT_M) and
    /// [`DEFAULT_N`](Self::DEFAULT_N) with MLA-like payload dimensions.
    pub fn default_grid(world_size: u32) -> Self {
        let buckets = Self::DEFAULT_M
            .iter()
            .flat_map(|&m| Self::DEFAULT_N.iter().map(move |&n| (m, n)))
            .collect();
        Self {
            buckets,
            m_max: 256,
            n_max: 512,
            world_size,
            heads: 128,
            head_size: 576,
            hidden: 7168,
            max_blocks: 16_384,
            elem_bytes: 2,
            int_bytes: 4,
        }
    }

    pub fn validate(&self) -> Result<(), RoutingError> {
        let bad = RoutingError::InvalidShapeSpace;
        if self.buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("buckets must be sorted and distinct"));
        }
        if self.buckets.iter().any(|&(m, n)| m > self.m_max || n > self.n_max) {
            return Err(bad("bucket exceeds (m_max, n_max)"));
        }
        if !self.buckets.is_empty() && !self.buckets.contains(&(self.m_max, self.n_max)) {
            return Err(bad("(m_max, n_max) must be a bucket"));
        }
        if self.elem_bytes == 0 || self.int_bytes == 0 {
            return Err(bad("element widths must be positive"));
        }
        Ok(())
    }
}

/// Smallest bucket, in lexicographic order, that dominates `(m, n)`.
pub fn bucket_shape(m: u32, n: u32, space: &ShapeSpace) -> Result<(u32, u32), RoutingError> {
    if m > space.m_max || n > space.n_max {
        return Err(RoutingError::ShapeOverflow {
            m,
            n,
            m_max: space.m_max,
            n_max: space.n_max,
        });
    }
    space
        .buckets
        .iter()
        .copied()
        .filter(|&(bm, bn)| bm >= m && bn >= n)
        .min()
        .ok_or(RoutingError::NoBucket { m, n })
}

/// Bytes of each pool in the shared graph buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FootprintBreakdown {
    pub graphs: usize,
    pub q_pool: u64,
    pub res_pool: u64,
    pub lse_pool: u64,
    pub input_pool: u64,
    pub block_table: u64,
    pub seq_lens: u64,
}

impl FootprintBreakdown {
    pub fn total_bytes(&self) -> u64 {
        self.q_pool + self.res_pool + self.lse_pool + self.input_pool + self.block_table + self.seq_lens
    }
}

/// Graph count and pool sizes. One pool serves every bucket, so the bytes do
/// not depend on the number of buckets.
pub fn graph_memory_footprint(space: &ShapeSpace) -> FootprintBreakdown {
    let w = u64::from(space.world_size);
    let (m, n) = (u64::from(space.m_max), u64::from(space.n_max));
    let e = u64::from(space.elem_bytes);
    let i = u64::from(space.int_bytes);
    let hh = u64::from(space.heads) * u64::from(space.head_size);
    FootprintBreakdown {
        graphs: space.buckets.len(),
        q_pool: e * w * m * hh,
        res_pool: e * w * n * hh,
        lse_pool: e * w * n * u64::from(space.head_size),
        input_pool: e * m * u64::from(space.hidden),
        block_table: i * m * u64::from(space.max_blocks),
        seq_lens: i * m,
    }
}
