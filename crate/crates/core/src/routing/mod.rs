//! Per-instance binding configurations and the binary routing masks derived
//! from them.
//!
//! Instance `s` receives one query for every request it holds a shard of
//! (its Q-Route table, `N x W`), and gathers partial results for every
//! request bound to it for MoE (its Res-Route table, `M x W`).

mod shape;

use std::collections::BTreeMap;
use std::io::Write;

use thiserror::Error;

pub use shape::{bucket_shape, graph_memory_footprint, FootprintBreakdown, ShapeSpace};

use crate::model::{InstanceId, Placement, RequestId};

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("request {request}: {reason}")]
    InconsistentPlacement { request: RequestId, reason: &'static str },
    #[error("shape ({m}, {n}) exceeds the shape space maximum ({m_max}, {n_max})")]
    ShapeOverflow { m: u32, n: u32, m_max: u32, n_max: u32 },
    #[error("no bucket dominates shape ({m}, {n})")]
    NoBucket { m: u32, n: u32 },
    #[error("invalid shape space: {0}")]
    InvalidShapeSpace(&'static str),
    #[error("malformed routing dump at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What one instance does for the current iteration.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindingConfig {
    pub instance: InstanceId,
    /// Requests whose MoE binding is this instance, by id (`M` rows).
    pub moe_bound: Vec<RequestId>,
    /// KV binding of each MoE-bound request, in binding order.
    pub kv_bindings: BTreeMap<RequestId, Vec<InstanceId>>,
    /// Requests with a shard here, by id (`N` rows).
    pub shard_requests: Vec<RequestId>,
    /// For each resident shard: where its query comes from and its local tokens.
    pub shard_sources: BTreeMap<RequestId, (InstanceId, u64)>,
}

impl BindingConfig {
    pub fn m(&self) -> usize {
        self.moe_bound.len()
    }

    pub fn n(&self) -> usize {
        self.shard_requests.len()
    }

    /// Resident KV tokens over all shards.
    pub fn local_tokens(&self) -> u64 {
        self.shard_sources.values().map(|&(_, t)| t).sum()
    }
}

/// Groups committed placements by instance.
pub fn build_binding_config<'a>(
    placements: impl IntoIterator<Item = (RequestId, &'a Placement)>,
    world_size: usize,
) -> Result<Vec<BindingConfig>, RoutingError> {
    let mut configs: Vec<BindingConfig> = (0..world_size)
        .map(|i| BindingConfig {
            instance: InstanceId(i),
            ..Default::default()
        })
        .collect();
    let mut sorted: Vec<(RequestId, &Placement)> = placements.into_iter().collect();
    sorted.sort_by_key(|(id, _)| *id);
    for (request, p) in sorted {
        let bad = |reason| RoutingError::InconsistentPlacement { request, reason };
        let m = p.moe_binding();
        if !p.contains(m) {
            return Err(bad("MoE binding outside the KV binding"));
        }
        let binding: Vec<InstanceId> = p.kv_binding().collect();
        if binding.iter().any(|s| s.0 >= world_size) {
            return Err(bad("binding references an unknown instance"));
        }
        if (1..binding.len()).any(|i| binding[..i].contains(&binding[i])) {
            return Err(bad("instance repeated in the KV binding"));
        }
        let home = &mut configs[m.0];
        if home.kv_bindings.insert(request, binding).is_some() {
            return Err(bad("request listed twice"));
        }
        home.moe_bound.push(request);
        for shard in p.shards() {
            let c = &mut configs[shard.instance.0];
            c.shard_requests.push(request);
            c.shard_sources.insert(request, (m, shard.tokens));
        }
    }
    Ok(configs)
}

/// Dense binary matrix, one row per request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteMask {
    width: usize,
    rows: Vec<(RequestId, Vec<bool>)>,
}

impl RouteMask {
    fn new(width: usize) -> Self {
        Self {
            width,
            rows: Vec::new(),
        }
    }

    fn push_row(&mut self, request: RequestId, ones: impl IntoIterator<Item = InstanceId>) {
        let mut bits = vec![false; self.width];
        for s in ones {
            bits[s.0] = true;
        }
        self.rows.push((request, bits));
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn row_count(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> impl Iterator<Item = (RequestId, &[bool])> {
        self.rows.iter().map(|(r, b)| (*r, b.as_slice()))
    }

    pub fn row_of(&self, request: RequestId) -> Option<&[bool]> {
        self.rows.iter().find(|(r, _)| *r == request).map(|(_, b)| b.as_slice())
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.rows[row].1[col]
    }

    pub fn ones(&self) -> usize {
        self.rows.iter().map(|(_, b)| b.iter().filter(|&&x| x).count()).sum()
    }

    /// Set columns of a row, as instance ids.
    pub fn columns(&self, row: usize) -> impl Iterator<Item = InstanceId> + '_ {
        self.rows[row]
            .1
            .iter()
            .enumerate()
            .filter(|(_, &x)| x)
            .map(|(i, _)| InstanceId(i))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingTables {
    pub instance: InstanceId,
    /// `N x W`: which MoE binding each resident shard's query comes from.
    pub q_route: RouteMask,
    /// `M x W`: which KV-binding members return partials for each MoE-bound request.
    pub res_route: RouteMask,
}

impl RoutingTables {
    /// Queries this instance sends to other instances.
    pub fn outbound_queries(&self) -> usize {
        (0..self.res_route.row_count())
            .map(|r| self.res_route.columns(r).filter(|&c| c != self.instance).count())
            .sum()
    }

    /// Partials this instance sends back to other instances.
    pub fn outbound_partials(&self) -> usize {
        (0..self.q_route.row_count())
            .filter(|&r| self.q_route.columns(r).any(|c| c != self.instance))
            .count()
    }
}

pub fn derive_routing_tables(configs: &[BindingConfig]) -> Vec<RoutingTables> {
    let width = configs.len();
    configs
        .iter()
        .map(|c| {
            let mut q_route = RouteMask::new(width);
            for r in &c.shard_requests {
                q_route.push_row(*r, [c.shard_sources[r].0]);
            }
            let mut res_route = RouteMask::new(width);
            for r in &c.moe_bound {
                res_route.push_row(*r, c.kv_bindings[r].iter().copied());
            }
            RoutingTables {
                instance: c.instance,
                q_route,
                res_route,
            }
        })
        .collect()
}

const DUMP_HEADER: [&str; 5] = ["instance", "table", "row", "request_id", "columns"];

/// One parsed row of a routing dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RouteRow {
    pub instance: InstanceId,
    pub table: String,
    pub row: usize,
    pub request: RequestId,
    pub columns: Vec<bool>,
}

/// Writes `instance,table,row,request_id,columns` with columns as a `0/1` string.
pub fn write_routing_csv<W: Write>(tables: &[RoutingTables], out: W) -> Result<(), RoutingError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(DUMP_HEADER).map_err(csv_io)?;
    for t in tables {
        for (name, mask) in [("q_route", &t.q_route), ("res_route", &t.res_route)] {
            for (i, (req, bits)) in mask.rows().enumerate() {
                let bitstring: String = bits.iter().map(|&b| if b { '1' } else { '0' }).collect();
                w.write_record([
                    t.instance.0.to_string(),
                    name.into(),
                    i.to_string(),
                    req.0.to_string(),
                    bitstring,
                ])
                .map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn parse_routing_csv(text: &str) -> Result<Vec<RouteRow>, RoutingError> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let malformed = |line: usize, reason: String| RoutingError::Malformed { line, reason };
    let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?;
    if headers != DUMP_HEADER.as_slice() {
        return Err(malformed(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    let mut width = None;
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| malformed(line, e.to_string()))?;
        if record.len() != 5 {
            return Err(malformed(line, format!("expected 5 fields, got {}", record.len())));
        }
        let table = record[1].to_string();
        if table != "q_route" && table != "res_route" {
            return Err(malformed(line, format!("unknown table {table:?}")));
        }
        let num = |k: usize| {
            record[k]
                .parse::<u64>()
                .map_err(|e| malformed(line, format!("field {k}: {e}")))
        };
        let columns = record[4]
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(malformed(line, format!("bad mask character {c:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        if *width.get_or_insert(columns.len()) != columns.len() {
            return Err(malformed(line, "mask width changed".into()));
        }
        let instance = usize::try_from(num(0)?).map_err(|e| malformed(line, e.to_string()))?;
        let row = usize::try_from(num(2)?).map_err(|e| malformed(line, e.to_string()))?;
        rows.push(RouteRow {
            instance: InstanceId(instance),
            table,
            row,
            request: RequestId(num(3)?),
            columns,
        });
    }
    Ok(rows)
}

fn csv_io(e: csv::Error) -> RoutingError {
    RoutingError::Io(std::io::Error::other(e))
}
