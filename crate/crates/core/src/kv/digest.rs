//! Bookkeeping that decides when a backup-log segment may be committed.

use std::collections::{BTreeMap, BTreeSet};

/// Shard ownership among digest actors.
pub fn digest_actor(shard: u16, actors: usize) -> usize {
    shard as usize % actors.max(1)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommitRecord {
    pub segment: u32,
    pub max_ver: BTreeMap<u16, u64>,
    pub commit_ver: BTreeMap<u16, u64>,
}

#[derive(Debug, Clone, Default)]
pub struct DigestState {
    /// Per-shard CommitVer learned from COMMITVER entries.
    commit_ver: BTreeMap<u16, u64>,
    /// MaxVerArray of each digested segment that is not yet committed.
    max_ver: BTreeMap<u32, BTreeMap<u16, u64>>,
    waiting: BTreeSet<u32>,
}

impl DigestState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn commit_ver(&self, shard: u16) -> u64 {
        self.commit_ver.get(&shard).copied().unwrap_or(0)
    }

    pub fn commit_vers(&self) -> &BTreeMap<u16, u64> {
        &self.commit_ver
    }

    /// Monotone: lower values are ignored.
    pub fn raise_commit_ver(&mut self, shard: u16, v: u64) {
        let e = self.commit_ver.entry(shard).or_insert(0);
        *e = (*e).max(v);
    }

    pub fn observe(&mut self, segment: u32, shard: u16, version: u64) {
        let m = self.max_ver.entry(segment).or_default().entry(shard).or_insert(0);
        *m = (*m).max(version);
    }

    /// Marks a segment as fully scanned; it commits once covered.
    pub fn finish_scan(&mut self, segment: u32) {
        self.max_ver.entry(segment).or_default();
        self.waiting.insert(segment);
    }

    pub fn max_ver(&self, segment: u32) -> Option<&BTreeMap<u16, u64>> {
        self.max_ver.get(&segment)
    }

    /// MaxVerArray <= CommitVerArray pointwise over shards present.
    pub fn covered(&self, segment: u32) -> bool {
        self.max_ver
            .get(&segment)
            .is_none_or(|m| m.iter().all(|(s, &v)| v <= self.commit_ver(*s)))
    }

    /// Removes and returns every waiting segment that is now covered.
    pub fn take_committable(&mut self) -> Vec<CommitRecord> {
        let ready: Vec<u32> = self
            .waiting
            .iter()
            .copied()
            .filter(|&s| self.covered(s))
            .collect();
        ready
            .into_iter()
            .map(|s| {
                self.waiting.remove(&s);
                let max_ver = self.max_ver.remove(&s).unwrap_or_default();
                let commit_ver = max_ver.keys().map(|k| (*k, self.commit_ver(*k))).collect();
                CommitRecord {
                    segment: s,
                    max_ver,
                    commit_ver,
                }
            })
            .collect()
    }

    pub fn waiting(&self) -> impl Iterator<Item = u32> + '_ {
        self.waiting.iter().copied()
    }

    pub fn forget(&mut self, segment: u32) {
        self.waiting.remove(&segment);
        self.max_ver.remove(&segment);
    }
}
