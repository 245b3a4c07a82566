use serde::{Deserialize, Serialize};

use super::SchedulerError;

/// One row of a length-bucket table. The last row has no upper bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_len: Option<u64>,
    pub degree: u32,
}

/// Maps a request length to its preferred context-parallel degree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<BucketEntry>", into = "Vec<BucketEntry>")]
pub struct BucketFn {
    entries: Vec<BucketEntry>,
}

impl BucketFn {
    pub fn new(entries: Vec<BucketEntry>) -> Result<Self, SchedulerError> {
        let bad = |reason: &'static str| SchedulerError::InvalidBucketTable(reason);
        let (last, bounded) = entries.split_last().ok_or(bad("table is empty"))?;
        if last.max_len.is_some() {
            return Err(bad("last entry must be open-ended"));
        }
        let mut prev_len = 0;
        for e in bounded {
            let len = e.max_len.ok_or(bad("only the last entry may be open-ended"))?;
            if len <= prev_len {
                return Err(bad("lengths must be strictly increasing"));
            }
            prev_len = len;
        }
        if entries.iter().any(|e| e.degree == 0) {
            return Err(bad("degrees must be at least 1"));
        }
        if entries.windows(2).any(|w| w[1].degree < w[0].degree) {
            return Err(bad("degrees must be non-decreasing"));
        }
        Ok(Self { entries })
    }

    /// `{<=32K: 1, <=128K: 2, <=384K: 4, else: 8}`.
    pub fn default_table() -> Self {
        Self::new(vec![
            BucketEntry {
                max_len: Some(32_768),
                degree: 1,
            },
            BucketEntry {
                max_len: Some(131_072),
                degree: 2,
            },
            BucketEntry {
                max_len: Some(393_216),
                degree: 4,
            },
            BucketEntry {
                max_len: None,
                degree: 8,
            },
        ])
        .expect("static table is valid")
    }

    /// Every length stays local.
    pub fn local_only() -> Self {
        Self {
            entries: vec![BucketEntry {
                max_len: None,
                degree: 1,
            }],
        }
    }

    pub fn entries(&self) -> &[BucketEntry] {
        &self.entries
    }

    pub fn lookup(&self, len: u64) -> u32 {
        self.entries
            .iter()
            .find(|e| e.max_len.is_none_or(|m| len <= m))
            .map(|e| e.degree)
            .expect("last entry is open-ended")
    }

    /// Collapses consecutive rows with equal degree.
    pub fn from_degrees(points: &[(u64, u32)]) -> Result<Self, SchedulerError> {
        let mut entries: Vec<BucketEntry> = Vec::new();
        for &(len, degree) in points {
            match entries.last_mut() {
                Some(e) if e.degree == degree => e.max_len = Some(len),
                _ => entries.push(BucketEntry {
                    max_len: Some(len),
                    degree,
                }),
            }
        }
        if let Some(e) = entries.last_mut() {
            e.max_len = None;
        }
        Self::new(entries)
    }
}

impl Default for BucketFn {
    fn default() -> Self {
        Self::default_table()
    }
}

impl TryFrom<Vec<BucketEntry>> for BucketFn {
    type Error = SchedulerError;

    fn try_from(entries: Vec<BucketEntry>) -> Result<Self, Self::Error> {
        Self::new(entries)
    }
}

impl From<BucketFn> for Vec<BucketEntry> {
    fn from(b: BucketFn) -> Self {
        b.entries
    }
}

/// `k_r = min(Bucket(len), node size)`.
pub fn cp_degree(seq_len: u64, buckets: &BucketFn, node_instance_count: usize) -> usize {
    (buckets.lookup(seq_len) as usize).min(node_instance_count).max(1)
}
