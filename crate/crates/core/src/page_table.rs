//! Global page table: logical KV pages of every request mapped to
//! `(instance, frame)` tuples anywhere in the cluster.
//!
//! Each shard of a placement occupies `ceil(tokens / page_size)` whole frames
//! on its instance; a partially filled last page is never shared with another
//! instance. Logical page ids are assigned contiguously, shard after shard, in
//! KV-binding order.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;

use thiserror::Error;

use crate::model::{ClusterState, FrameId, InstanceId, Placement, RequestId};

#[derive(Debug, Error)]
pub enum PageTableError {
    #[error("instance {instance} needs {needed} frames but has {free} free")]
    InsufficientFrames {
        instance: InstanceId,
        needed: u64,
        free: u64,
    },
    #[error("request {0} has no pages")]
    UnknownRequest(RequestId),
    #[error("request {0} already owns pages")]
    AlreadyAllocated(RequestId),
    #[error("request {request} has no logical page {page}")]
    UnknownPage { request: RequestId, page: u32 },
    #[error("instance {0} is not part of the cluster")]
    UnknownInstance(InstanceId),
    #[error("malformed page-table dump at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One row of the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct PageEntry {
    pub request: RequestId,
    pub logical_page: u32,
    pub instance: InstanceId,
    pub frame: FrameId,
}

/// Contiguous run of a request's logical pages living on one instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageSegment {
    pub instance: InstanceId,
    pub frames: Vec<FrameId>,
    pub tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct RequestPages {
    binding: Vec<InstanceId>,
    segments: Vec<PageSegment>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GlobalPageTable {
    requests: BTreeMap<RequestId, RequestPages>,
}

impl GlobalPageTable {
    pub fn contains(&self, request: RequestId) -> bool {
        self.requests.contains_key(&request)
    }

    pub fn request_count(&self) -> usize {
        self.requests.len()
    }

    pub fn page_count(&self, request: RequestId) -> Option<u32> {
        self.requests
            .get(&request)
            .map(|r| r.segments.iter().map(|s| s.frames.len() as u32).sum())
    }

    pub fn segments(&self, request: RequestId) -> Option<&[PageSegment]> {
        self.requests.get(&request).map(|r| r.segments.as_slice())
    }

    /// Runtime lookup of one logical page.
    pub fn lookup(&self, request: RequestId, page: u32) -> Result<(InstanceId, FrameId), PageTableError> {
        let pages = self
            .requests
            .get(&request)
            .ok_or(PageTableError::UnknownPage { request, page })?;
        let mut base = 0u32;
        for seg in &pages.segments {
            let len = seg.frames.len() as u32;
            if page < base + len {
                return Ok((seg.instance, seg.frames[(page - base) as usize]));
            }
            base += len;
        }
        Err(PageTableError::UnknownPage { request, page })
    }

    /// All entries ordered by `(request, logical_page)`.
    pub fn entries(&self) -> impl Iterator<Item = PageEntry> + '_ {
        self.requests.iter().flat_map(|(&request, pages)| {
            pages
                .segments
                .iter()
                .flat_map(|seg| seg.frames.iter().map(move |&f| (seg.instance, f)))
                .enumerate()
                .map(move |(i, (instance, frame))| PageEntry {
                    request,
                    logical_page: i as u32,
                    instance,
                    frame,
                })
        })
    }

    pub fn write_dump<W: Write>(&self, out: W) -> Result<(), PageTableError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["request_id", "logical_page", "instance_id", "frame_id"])
            .map_err(csv_io)?;
        for e in self.entries() {
            w.write_record([
                e.request.0.to_string(),
                e.logical_page.to_string(),
                e.instance.0.to_string(),
                e.frame.0.to_string(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Parses a dump written by [`write_dump`](Self::write_dump), rejecting
    /// duplicate keys and physical frames mapped twice.
    pub fn parse_dump(text: &str) -> Result<Vec<PageEntry>, PageTableError> {
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let malformed = |line: usize, reason: String| PageTableError::Malformed { line, reason };
        let headers = reader.headers().map_err(|e| malformed(1, e.to_string()))?;
        if headers != vec!["request_id", "logical_page", "instance_id", "frame_id"] {
            return Err(malformed(1, "unexpected header".into()));
        }
        let mut entries = Vec::new();
        let mut keys = HashSet::new();
        let mut frames = HashSet::new();
        for (i, record) in reader.records().enumerate() {
            let line = i + 2;
            let record = record.map_err(|e| malformed(line, e.to_string()))?;
            if record.len() != 4 {
                return Err(malformed(line, format!("expected 4 fields, got {}", record.len())));
            }
            let field = |k: usize| -> Result<u64, PageTableError> {
                record[k]
                    .trim()
                    .parse::<u64>()
                    .map_err(|e| malformed(line, format!("field {k}: {e}")))
            };
            let page = u32::try_from(field(1)?).map_err(|e| malformed(line, e.to_string()))?;
            let frame = u32::try_from(field(3)?).map_err(|e| malformed(line, e.to_string()))?;
            let instance = usize::try_from(field(2)?).map_err(|e| malformed(line, e.to_string()))?;
            let entry = PageEntry {
                request: RequestId(field(0)?),
                logical_page: page,
                instance: InstanceId(instance),
                frame: FrameId(frame),
            };
            if !keys.insert((entry.request, entry.logical_page)) {
                return Err(malformed(line, "duplicate logical page".into()));
            }
            if !frames.insert((entry.instance, entry.frame)) {
                return Err(malformed(line, "physical frame mapped twice".into()));
            }
            entries.push(entry);
        }
        Ok(entries)
    }
}

fn csv_io(e: csv::Error) -> PageTableError {
    PageTableError::Io(std::io::Error::other(e))
}

impl ClusterState {
    /// Allocates frames for an admitted placement and records its pages.
    ///
    /// Either every shard is allocated or nothing changes.
    pub fn allocate(&mut self, request: RequestId, placement: &Placement) -> Result<Vec<PageEntry>, PageTableError> {
        if self.page_table.contains(request) {
            return Err(PageTableError::AlreadyAllocated(request));
        }
        for shard in placement.shards() {
            let inst = self
                .instances
                .get(shard.instance.0)
                .ok_or(PageTableError::UnknownInstance(shard.instance))?;
            let needed = self.topology.pages_for(shard.tokens);
            if inst.free_pages() < needed {
                return Err(PageTableError::InsufficientFrames {
                    instance: shard.instance,
                    needed,
                    free: inst.free_pages(),
                });
            }
        }
        let mut pages = RequestPages::default();
        for shard in placement.shards() {
            let needed = self.topology.pages_for(shard.tokens) as usize;
            let inst = &mut self.instances[shard.instance.0];
            inst.shard_count += 1;
            pages.binding.push(shard.instance);
            if needed == 0 {
                continue;
            }
            let split_at = inst.free_frames.len() - needed;
            let mut frames = inst.free_frames.split_off(split_at);
            frames.reverse();
            inst.kv_load += shard.tokens;
            pages.segments.push(PageSegment {
                instance: shard.instance,
                frames,
                tokens: shard.tokens,
            });
        }
        self.page_table.requests.insert(request, pages);
        Ok(self.page_table.entries_of(request))
    }

    /// Releases every page of `request`; returns frames released per instance.
    pub fn free(&mut self, request: RequestId) -> Result<BTreeMap<InstanceId, u32>, PageTableError> {
        let pages = self
            .page_table
            .requests
            .remove(&request)
            .ok_or(PageTableError::UnknownRequest(request))?;
        for s in &pages.binding {
            self.instances[s.0].shard_count -= 1;
        }
        let mut released = BTreeMap::new();
        for seg in pages.segments {
            let inst = &mut self.instances[seg.instance.0];
            inst.kv_load -= seg.tokens;
            *released.entry(seg.instance).or_insert(0) += seg.frames.len() as u32;
            inst.free_frames.extend(seg.frames.into_iter().rev());
        }
        Ok(released)
    }

    pub fn lookup(&self, request: RequestId, page: u32) -> Result<(InstanceId, FrameId), PageTableError> {
        self.page_table.lookup(request, page)
    }

    /// Appends one decoded token to `request`'s KV cache and returns the
    /// instance that stored it.
    ///
    /// The token lands on the instance holding the request's last page. When
    /// that page is full and the instance has no free frame, the token spills
    /// to the KV-binding member with the most free frames.
    pub fn append_token(&mut self, request: RequestId) -> Result<InstanceId, PageTableError> {
        let page_size = u64::from(self.topology.page_size());
        let pages = self
            .page_table
            .requests
            .get_mut(&request)
            .ok_or(PageTableError::UnknownRequest(request))?;
        let last = pages
            .segments
            .last_mut()
            .ok_or(PageTableError::UnknownRequest(request))?;
        if last.tokens % page_size != 0 {
            last.tokens += 1;
            self.instances[last.instance.0].kv_load += 1;
            return Ok(last.instance);
        }
        let target = if !self.instances[last.instance.0].free_frames.is_empty() {
            last.instance
        } else {
            let mut best: Option<InstanceId> = None;
            for &s in &pages.binding {
                let free = self.instances[s.0].free_frames.len();
                if free > 0 && best.is_none_or(|b| free > self.instances[b.0].free_frames.len()) {
                    best = Some(s);
                }
            }
            best.ok_or(PageTableError::InsufficientFrames {
                instance: last.instance,
                needed: 1,
                free: 0,
            })?
        };
        let inst = &mut self.instances[target.0];
        let frame = inst.free_frames.pop().expect("checked non-empty");
        inst.kv_load += 1;
        if target == last.instance {
            last.frames.push(frame);
            last.tokens += 1;
        } else {
            pages.segments.push(PageSegment {
                instance: target,
                frames: vec![frame],
                tokens: 1,
            });
        }
        Ok(target)
    }
}

impl GlobalPageTable {
    fn entries_of(&self, request: RequestId) -> Vec<PageEntry> {
        self.entries().filter(|e| e.request == request).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClusterTopology, Shard};

    fn cluster(instances: usize, page_size: u32, capacity: u32) -> ClusterState {
        ClusterState::new(ClusterTopology::uniform(1, instances, page_size).unwrap(), capacity)
    }

    fn split(parts: &[(usize, u64)]) -> Placement {
        let shards = parts
            .iter()
            .map(|&(i, t)| Shard {
                instance: InstanceId(i),
                tokens: t,
            })
            .collect();
        Placement::new(InstanceId(parts[0].0), shards).unwrap()
    }

    #[test]
    fn single_page_allocation() {
        let mut c = cluster(1, 16, 4);
        let entries = c.allocate(RequestId(7), &Placement::local(InstanceId(0), 1)).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].logical_page, 0);
        assert_eq!(entries[0].instance, InstanceId(0));
        assert_eq!(c.instances[0].kv_load, 1);
        assert_eq!(c.instances[0].free_pages(), 3);
    }

    #[test]
    fn split_layout_follows_binding_order() {
        let mut c = cluster(2, 16, 8);
        let r = RequestId(1);
        c.allocate(r, &split(&[(0, 30), (1, 10)])).unwrap();
        assert_eq!(c.lookup(r, 0).unwrap().0, InstanceId(0));
        assert_eq!(c.lookup(r, 1).unwrap().0, InstanceId(0));
        assert_eq!(c.lookup(r, 2).unwrap().0, InstanceId(1));
        assert!(matches!(c.lookup(r, 3), Err(PageTableError::UnknownPage { .. })));

        let released = c.free(r).unwrap();
        assert_eq!(released.get(&InstanceId(0)), Some(&2));
        assert_eq!(released.get(&InstanceId(1)), Some(&1));
        assert!(!c.page_table.contains(r));
        assert!(matches!(c.free(r), Err(PageTableError::UnknownRequest(_))));
        assert_eq!(c.instances[0].kv_load, 0);
        assert_eq!(c.instances[1].shard_count, 0);
    }

    #[test]
    fn dcp_example_holds_300k_tokens_per_instance() {
        let mut c = cluster(2, 16, 40_000);
        c.allocate(RequestId(1), &split(&[(0, 300_000), (1, 300_000)])).unwrap();
        assert_eq!(c.instances[0].allocated_pages(), 18_750);
        assert_eq!(c.instances[1].allocated_pages(), 18_750);
        assert_eq!(c.instances[0].kv_load, 300_000);
    }

    #[test]
    fn reallocation_keeps_logical_indices() {
        let mut c = cluster(2, 16, 8);
        let r = RequestId(3);
        let p = split(&[(0, 30), (1, 10)]);
        let first: Vec<u32> = c.allocate(r, &p).unwrap().iter().map(|e| e.logical_page).collect();
        c.free(r).unwrap();
        let second: Vec<u32> = c.allocate(r, &p).unwrap().iter().map(|e| e.logical_page).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn insufficient_frames_leaves_state_untouched() {
        let mut c = cluster(2, 16, 2);
        let before = c.instances.clone();
        let err = c.allocate(RequestId(1), &split(&[(0, 16), (1, 48)])).unwrap_err();
        assert!(matches!(err, PageTableError::InsufficientFrames { needed: 3, .. }));
        assert_eq!(c.instances, before);
        assert!(!c.page_table.contains(RequestId(1)));
    }

    #[test]
    fn double_allocation_is_rejected() {
        let mut c = cluster(1, 16, 8);
        c.allocate(RequestId(1), &Placement::local(InstanceId(0), 5)).unwrap();
        assert!(matches!(
            c.allocate(RequestId(1), &Placement::local(InstanceId(0), 5)),
            Err(PageTableError::AlreadyAllocated(_))
        ));
    }

    #[test]
    fn zero_token_shard_takes_no_frames() {
        let mut c = cluster(2, 16, 4);
        let p = Placement::new(
            InstanceId(0),
            vec![
                Shard {
                    instance: InstanceId(0),
                    tokens: 0,
                },
                Shard {
                    instance: InstanceId(1),
                    tokens: 20,
                },
            ],
        )
        .unwrap();
        c.allocate(RequestId(1), &p).unwrap();
        assert_eq!(c.instances[0].allocated_pages(), 0);
        assert_eq!(c.instances[0].shard_count, 1);
        assert_eq!(c.page_table.page_count(RequestId(1)), Some(2));
    }

    #[test]
    fn append_fills_partial_page_then_spills() {
        let mut c = cluster(2, 4, 2);
        let r = RequestId(1);
        c.allocate(r, &split(&[(0, 4), (1, 3)])).unwrap();
        // partial page on instance 1
        assert_eq!(c.append_token(r).unwrap(), InstanceId(1));
        // page full, instance 1 has one free frame left
        assert_eq!(c.append_token(r).unwrap(), InstanceId(1));
        for _ in 0..3 {
            assert_eq!(c.append_token(r).unwrap(), InstanceId(1));
        }
        // instance 1 exhausted; spill to instance 0
        assert_eq!(c.append_token(r).unwrap(), InstanceId(0));
        assert_eq!(c.page_table.page_count(r), Some(4));
        assert_eq!(c.lookup(r, 3).unwrap().0, InstanceId(0));
        for _ in 0..3 {
            c.append_token(r).unwrap();
        }
        assert!(matches!(
            c.append_token(r),
            Err(PageTableError::InsufficientFrames { .. })
        ));
        assert_eq!(c.instances[0].kv_load + c.instances[1].kv_load, 16);
    }

    #[test]
    fn dump_round_trips_through_parser() {
        let mut c = cluster(2, 16, 8);
        c.allocate(RequestId(1), &split(&[(0, 30), (1, 10)])).unwrap();
        c.allocate(RequestId(2), &Placement::local(InstanceId(1), 17)).unwrap();
        let mut buf = Vec::new();
        c.page_table.write_dump(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("request_id,logical_page,instance_id,frame_id\n1,0,0,0\n"));
        let parsed = GlobalPageTable::parse_dump(&text).unwrap();
        assert_eq!(parsed, c.page_table.entries().collect::<Vec<_>>());
    }

    #[test]
    fn parser_rejects_aliasing() {
        let text = "request_id,logical_page,instance_id,frame_id\n1,0,0,5\n2,0,0,5\n";
        assert!(matches!(
            GlobalPageTable::parse_dump(text),
            Err(PageTableError::Malformed { line: 3, .. })
        ));
        assert!(GlobalPageTable::parse_dump("a,b\n").is_err());
        assert!(GlobalPageTable::parse_dump("request_id,logical_page,instance_id,frame_id\n1,x,0,0\n").is_err());
    }
}
