//! Single-server storage engine: t-logs, segment lifecycle, shard indexes,
//! digest of the backup log and garbage collection.
//!
//! Network concerns live in the cluster; every method here works on the
//! server's own [`PmDevice`].

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::digest::{digest_actor, CommitRecord, DigestState};
use super::entry::{
    parse_block, DecodedEntry, EntryError, EntryLimits, Header, LogEntry, OpType, Reassembler,
    HEADER_LEN,
};
use super::index::{key_hash, shard_of, EntryProbe, ShardIndex};
use super::segment::{SegOwner, SegState, SegmentError, SegmentLayout, SegmentTable};
use crate::pm::{PmDevice, PmError};

#[derive(Debug, Error)]
pub enum KvError {
    #[error("shard {0} is not held by this server")]
    NoShard(u16),
    #[error("out of free segments")]
    OutOfSpace,
    #[error("entry of {0} bytes does not fit in a segment")]
    TooLarge(usize),
    #[error(transparent)]
    Entry(#[from] EntryError),
    #[error(transparent)]
    Segment(#[from] SegmentError),
    #[error(transparent)]
    Pm(#[from] PmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServerConfig {
    pub pm_capacity: u64,
    pub segment_size: u64,
    pub workers: usize,
    pub digest_actors: usize,
    pub mtu: usize,
    pub max_key: usize,
    pub max_value: usize,
    pub index_buckets: usize,
    pub gc_threshold: f64,
    /// GC runs unforced only when fewer than this fraction of segments are free.
    pub gc_free_watermark: f64,
    pub shards: u16,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            pm_capacity: 1 << 30,
            segment_size: super::segment::DEFAULT_SEGMENT_SIZE,
            workers: 24,
            digest_actors: 2,
            mtu: 1024,
            max_key: 256,
            max_value: 64 << 10,
            index_buckets: 1024,
            gc_threshold: 0.75,
            gc_free_watermark: 0.25,
            shards: 48,
        }
    }
}

impl ServerConfig {
    pub fn limits(&self) -> EntryLimits {
        EntryLimits {
            max_key: self.max_key,
            max_value: self.max_value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Primary,
    Backup,
}

#[derive(Debug, Clone)]
pub struct ShardState {
    pub shard: u16,
    pub role: Role,
    pub shard_version: u64,
    /// Primary: every version at or below is on all replicas.
    pub commit_ver: u64,
    pub index: ShardIndex,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub tlog_appends: u64,
    pub digested_entries: u64,
    pub digested_segments: u64,
    pub committed_segments: u64,
    pub gc_runs: u64,
    pub gc_freed: u64,
    pub gc_relocated: u64,
    pub gc_relocated_bytes: u64,
    pub per_actor_entries: [u64; 8],
}

#[derive(Debug, Clone, Copy, Default)]
struct Cursor {
    seg: Option<u32>,
    off: u64,
}

/// Reads entries out of PM for index probes.
pub struct PmProbe<'a> {
    pub pm: &'a PmDevice,
}

impl EntryProbe for PmProbe<'_> {
    fn probe(&self, addr: u64, key: &[u8]) -> Option<u64> {
        let mut buf = [0u8; HEADER_LEN + 256];
        let want = HEADER_LEN + key.len();
        let buf = if want <= buf.len() {
            self.pm.read_into(addr, &mut buf[..want]).ok()?;
            &buf[..want]
        } else {
            return self.pm.read(addr, want).ok().and_then(|b| probe_bytes(&b, key));
        };
        probe_bytes(buf, key)
    }
}

fn probe_bytes(b: &[u8], key: &[u8]) -> Option<u64> {
    let h = Header::parse(b)?;
    if h.op == OpType::CommitVer || h.seq != 0 || h.key_len as usize != key.len() {
        return None;
    }
    (&b[HEADER_LEN..HEADER_LEN + key.len()] == key).then_some(h.version)
}

#[derive(Debug, Clone)]
pub struct KvServer {
    cfg: ServerConfig,
    pub segments: SegmentTable,
    tlogs: Vec<Cursor>,
    clean: Cursor,
    outstanding: HashMap<u32, u32>,
    /// Bytes written into each segment (zeroed again on release).
    fill: HashMap<u32, u64>,
    pub shards: BTreeMap<u16, ShardState>,
    pub digest: DigestState,
    blog_reasm: Reassembler,
    /// Non-contiguous multi-block entries: head address -> blocks.
    scatter: HashMap<u64, Vec<(u64, usize)>>,
    scatter_rev: HashMap<u64, u64>,
    used_queue: VecDeque<u32>,
    stats: EngineStats,
}

impl KvServer {
    pub fn new(cfg: ServerConfig) -> Result<Self, KvError> {
        let layout = SegmentLayout::new(cfg.pm_capacity, cfg.segment_size)?;
        Ok(Self::with_table(cfg, SegmentTable::new(layout)))
    }

    fn with_table(cfg: ServerConfig, segments: SegmentTable) -> Self {
        Self {
            tlogs: vec![Cursor::default(); cfg.workers],
            clean: Cursor::default(),
            outstanding: HashMap::new(),
            fill: HashMap::new(),
            shards: BTreeMap::new(),
            digest: DigestState::new(),
            blog_reasm: Reassembler::new(cfg.mtu),
            scatter: HashMap::new(),
            scatter_rev: HashMap::new(),
            used_queue: VecDeque::new(),
            stats: EngineStats::default(),
            cfg,
            segments,
        }
    }

    /// Restarts from persisted state: segment meta is read back from PM and
    /// every non-free segment's fill level recomputed by scanning. Indexes
    /// are empty until [`KvServer::rebuild_indexes`].
    pub fn recover(cfg: ServerConfig, pm: &PmDevice) -> Result<Self, KvError> {
        let layout = SegmentLayout::new(cfg.pm_capacity, cfg.segment_size)?;
        let table = SegmentTable::load(layout, pm)?;
        let mut s = Self::with_table(cfg, table);
        for id in s.segments.ids_where(|m| m.state != SegState::Free) {
            let end = s.scan_end(pm, id);
            s.fill.insert(id, end);
        }
        Ok(s)
    }

    pub fn config(&self) -> &ServerConfig {
        &self.cfg
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn shard_of_key(&self, key: &[u8]) -> u16 {
        shard_of(key_hash(key), self.cfg.shards)
    }

    pub fn add_shard(&mut self, shard: u16, role: Role) -> &mut ShardState {
        let buckets = self.cfg.index_buckets;
        let s = self.shards.entry(shard).or_insert_with(|| ShardState {
            shard,
            role,
            shard_version: 0,
            commit_ver: 0,
            index: ShardIndex::new(buckets),
        });
        s.role = role;
        s
    }

    pub fn drop_shard(&mut self, shard: u16) -> Option<ShardState> {
        self.shards.remove(&shard)
    }

    // ---- reading

    fn block_lens(&self, pm: &PmDevice, addr: u64) -> Option<Vec<(u64, usize)>> {
        if let Some(b) = self.scatter.get(&addr) {
            return Some(b.clone());
        }
        let mut hdr = [0u8; HEADER_LEN];
        pm.read_into(addr, &mut hdr).ok()?;
        let h = Header::parse(&hdr)?;
        let mut out = Vec::with_capacity(h.cnt as usize);
        let mut cur = addr;
        for seq in 0..h.cnt {
            let mut hb = [0u8; HEADER_LEN];
            pm.read_into(cur, &mut hb).ok()?;
            let bh = Header::parse(&hb)?;
            if bh.seq != seq || bh.version != h.version {
                return None;
            }
            let len = bh.block_len(self.cfg.mtu)?;
            out.push((cur, len));
            cur += len as u64;
        }
        Some(out)
    }

    /// Decodes the entry whose first block is at `addr`.
    pub fn read_entry(&self, pm: &PmDevice, addr: u64) -> Option<DecodedEntry> {
        let blocks = self.block_lens(pm, addr)?;
        let mut r = Reassembler::new(self.cfg.mtu);
        for (a, len) in blocks {
            let bytes = pm.read(a, len).ok()?;
            parse_block(&bytes, self.cfg.mtu)?;
            if let Some(e) = r.scan(&bytes, a).0.pop() {
                return Some(e);
            }
        }
        None
    }

    pub fn lookup(&self, pm: &PmDevice, key: &[u8]) -> Result<Option<DecodedEntry>, KvError> {
        let h = key_hash(key);
        let shard = shard_of(h, self.cfg.shards);
        let st = self.shards.get(&shard).ok_or(KvError::NoShard(shard))?;
        let probe = PmProbe { pm };
        Ok(st
            .index
            .get(key, h, &probe)
            .and_then(|(addr, _)| self.read_entry(pm, addr)))
    }

    /// Value of `key`; tombstones and absent keys read as `None`.
    pub fn get(&self, pm: &PmDevice, key: &[u8]) -> Result<Option<Vec<u8>>, KvError> {
        Ok(self
            .lookup(pm, key)?
            .filter(|d| d.entry.op == OpType::Put)
            .map(|d| d.entry.value))
    }

    pub fn indexed_version(&self, pm: &PmDevice, key: &[u8]) -> Option<u64> {
        let h = key_hash(key);
        let st = self.shards.get(&shard_of(h, self.cfg.shards))?;
        st.index.get(key, h, &PmProbe { pm }).map(|(_, v)| v)
    }

    // ---- worker path

    pub fn next_version(&mut self, shard: u16) -> Result<u64, KvError> {
        let st = self.shards.get_mut(&shard).ok_or(KvError::NoShard(shard))?;
        st.shard_version += 1;
        Ok(st.shard_version)
    }

    fn seg_of(&self, addr: u64) -> Option<u32> {
        self.segments.layout().id_of(addr)
    }

    fn append(
        &mut self,
        pm: &mut PmDevice,
        which: Option<usize>,
        bytes: &[u8],
    ) -> Result<u64, KvError> {
        let seg_size = self.segments.segment_size();
        if bytes.len() as u64 > seg_size {
            return Err(KvError::TooLarge(bytes.len()));
        }
        let cur = match which {
            Some(w) => self.tlogs[w],
            None => self.clean,
        };
        let cur = match cur.seg {
            Some(s) if cur.off + bytes.len() as u64 <= seg_size => Cursor { seg: Some(s), off: cur.off },
            old => {
                let (owner, tag) = match which {
                    Some(w) => (SegOwner::Worker, w as u16),
                    None => (SegOwner::Clean, 0),
                };
                let id = self.segments.allocate(pm, owner, tag).ok_or(KvError::OutOfSpace)?;
                if let Some(o) = old {
                    self.seal(pm, o)?;
                }
                Cursor { seg: Some(id), off: 0 }
            }
        };
        let seg = cur.seg.expect("set");
        let addr = self.segments.base(seg) + cur.off;
        pm.write(addr, bytes)?;
        let next = Cursor {
            seg: Some(seg),
            off: cur.off + bytes.len() as u64,
        };
        self.fill.insert(seg, next.off);
        match which {
            Some(w) => self.tlogs[w] = next,
            None => self.clean = next,
        }
        Ok(addr)
    }

    fn seal(&mut self, pm: &mut PmDevice, seg: u32) -> Result<(), KvError> {
        if self.outstanding.get(&seg).copied().unwrap_or(0) == 0 {
            self.outstanding.remove(&seg);
            self.segments.transition(pm, seg, SegState::Committed)?;
        }
        Ok(())
    }

    fn is_current(&self, seg: u32) -> bool {
        self.clean.seg == Some(seg) || self.tlogs.iter().any(|c| c.seg == Some(seg))
    }

    /// Appends an encoded entry to `worker`'s t-log; the entry counts as
    /// outstanding until [`KvServer::tlog_done`].
    pub fn append_tlog(&mut self, pm: &mut PmDevice, worker: usize, blocks: &[Vec<u8>]) -> Result<u64, KvError> {
        let bytes = blocks.concat();
        let addr = self.append(pm, Some(worker), &bytes)?;
        let seg = self.seg_of(addr).expect("in a segment");
        *self.outstanding.entry(seg).or_insert(0) += 1;
        self.stats.tlog_appends += 1;
        Ok(addr)
    }

    /// The entry at `addr` is replicated (or abandoned). Sealed segments
    /// with nothing outstanding become Committed.
    pub fn tlog_done(&mut self, pm: &mut PmDevice, addr: u64) -> Result<(), KvError> {
        let Some(seg) = self.seg_of(addr) else {
            return Ok(());
        };
        if let Some(n) = self.outstanding.get_mut(&seg) {
            *n = n.saturating_sub(1);
            if *n == 0 && !self.is_current(seg) && self.segments.meta(seg).state == SegState::Using {
                self.outstanding.remove(&seg);
                self.segments.transition(pm, seg, SegState::Committed)?;
            }
        }
        Ok(())
    }

    /// Conditional index update: only strictly newer versions install.
    pub fn install(&mut self, pm: &PmDevice, shard: u16, key: &[u8], version: u64, addr: u64) -> Result<bool, KvError> {
        let st = self.shards.get_mut(&shard).ok_or(KvError::NoShard(shard))?;
        let ok = st.index.upsert(key, key_hash(key), version, addr, &PmProbe { pm });
        st.shard_version = st.shard_version.max(version);
        Ok(ok)
    }

    /// Indexes a decoded entry if its shard is held here; remembers block
    /// locations of scattered entries.
    pub fn index_decoded(&mut self, pm: &PmDevice, d: &DecodedEntry) -> bool {
        if d.entry.op == OpType::CommitVer || !self.shards.contains_key(&d.entry.shard) {
            return false;
        }
        if !d.is_contiguous() {
            self.scatter.insert(d.addr(), d.blocks.clone());
            for &(a, _) in &d.blocks[1..] {
                self.scatter_rev.insert(a, d.addr());
            }
        }
        self.install(pm, d.entry.shard, &d.entry.key, d.entry.version, d.addr())
            .unwrap_or(false)
    }

    /// Writes entries into a clean-owned segment and indexes them.
    pub fn store_entries(&mut self, pm: &mut PmDevice, entries: &[LogEntry]) -> Result<Vec<u64>, KvError> {
        let mut addrs = Vec::with_capacity(entries.len());
        for e in entries {
            let blocks = e.encode(self.cfg.mtu, &self.cfg.limits())?;
            let addr = self.append(pm, None, &blocks.concat())?;
            if e.op != OpType::CommitVer && self.shards.contains_key(&e.shard) {
                self.install(pm, e.shard, &e.key, e.version, addr)?;
            }
            addrs.push(addr);
        }
        Ok(addrs)
    }

    /// Reserves `len` bytes in the clean log for data written by a peer.
    pub fn reserve_clean(&mut self, pm: &mut PmDevice, len: usize) -> Result<u64, KvError> {
        let seg_size = self.segments.segment_size();
        if len as u64 > seg_size {
            return Err(KvError::TooLarge(len));
        }
        let cur = self.clean;
        let (seg, off) = match cur.seg {
            Some(s) if cur.off + len as u64 <= seg_size => (s, cur.off),
            old => {
                let id = self
                    .segments
                    .allocate(pm, SegOwner::Clean, 0)
                    .ok_or(KvError::OutOfSpace)?;
                if let Some(o) = old {
                    self.seal(pm, o)?;
                }
                (id, 0)
            }
        };
        self.clean = Cursor {
            seg: Some(seg),
            off: off + len as u64,
        };
        self.fill.insert(seg, off + len as u64);
        Ok(self.segments.base(seg) + off)
    }

    /// Indexes every entry found in `[addr, addr + len)`.
    pub fn ingest(&mut self, pm: &PmDevice, addr: u64, len: usize) -> usize {
        let Ok(bytes) = pm.read(addr, len) else {
            return 0;
        };
        let mut r = Reassembler::new(self.cfg.mtu);
        let (entries, _) = r.scan(&bytes, addr);
        entries.iter().filter(|d| self.index_decoded(pm, d)).count()
    }

    // ---- backup path

    /// Segments handed over by the control loop.
    pub fn hand_over(&mut self, segs: impl IntoIterator<Item = u32>) {
        self.used_queue.extend(segs);
    }

    pub fn pending_digest(&self) -> usize {
        self.used_queue.len()
    }

    fn scan_end(&self, pm: &PmDevice, seg: u32) -> u64 {
        let bytes = pm
            .read(self.segments.base(seg), self.segments.segment_size() as usize)
            .unwrap_or_default();
        let mut r = Reassembler::new(self.cfg.mtu);
        r.scan(&bytes, 0).1 as u64
    }

    /// Decodes every entry in `seg` using `reasm` for cross-segment blocks.
    pub fn scan_segment(&self, pm: &PmDevice, seg: u32, reasm: &mut Reassembler) -> (Vec<DecodedEntry>, Vec<(u64, Header)>, u64) {
        let base = self.segments.base(seg);
        if pm.read_u64(base).unwrap_or(0) == 0 {
            return (Vec::new(), Vec::new(), 0);
        }
        let len = self
            .fill
            .get(&seg)
            .copied()
            .filter(|_| self.segments.meta(seg).owner != SegOwner::Control)
            .unwrap_or(self.segments.segment_size());
        let bytes = pm.read(base, len as usize).unwrap_or_default();
        let mut blocks = Vec::new();
        let (entries, end) = reasm.scan_with(&bytes, base, &mut |a, h| blocks.push((a, *h)));
        (entries, blocks, end as u64)
    }

    /// Digests one Used backup-log segment: index updates, CommitVer
    /// updates and the segment's MaxVerArray.
    pub fn digest_segment(&mut self, pm: &PmDevice, seg: u32) -> usize {
        let mut reasm = std::mem::take(&mut self.blog_reasm);
        let (entries, blocks, end) = self.scan_segment(pm, seg, &mut reasm);
        self.blog_reasm = reasm;
        self.fill.insert(seg, end);
        for (_, h) in &blocks {
            if h.op != OpType::CommitVer && self.shards.contains_key(&h.shard) {
                self.digest.observe(seg, h.shard, h.version);
            }
        }
        let actors = self.cfg.digest_actors.max(1);
        let mut queues: Vec<Vec<&DecodedEntry>> = vec![Vec::new(); actors];
        for d in &entries {
            queues[digest_actor(d.entry.shard, actors)].push(d);
        }
        for (a, q) in queues.into_iter().enumerate() {
            for d in q {
                if d.entry.op == OpType::CommitVer {
                    self.digest.raise_commit_ver(d.entry.shard, d.entry.version);
                } else {
                    self.index_decoded(pm, d);
                }
                self.stats.per_actor_entries[a.min(7)] += 1;
            }
        }
        self.digest.finish_scan(seg);
        self.stats.digested_entries += entries.len() as u64;
        self.stats.digested_segments += 1;
        entries.len()
    }

    /// Digests everything handed over, then commits covered segments.
    pub fn digest_step(&mut self, pm: &mut PmDevice) -> Result<Vec<CommitRecord>, KvError> {
        while let Some(seg) = self.used_queue.pop_front() {
            self.digest_segment(pm, seg);
        }
        self.commit_ready(pm)
    }

    pub fn commit_ready(&mut self, pm: &mut PmDevice) -> Result<Vec<CommitRecord>, KvError> {
        let recs = self.digest.take_committable();
        for r in &recs {
            self.segments.transition(pm, r.segment, SegState::Committed)?;
            self.stats.committed_segments += 1;
        }
        Ok(recs)
    }

    // ---- garbage collection

    fn head_of(&self, addr: u64, h: &Header) -> u64 {
        if h.seq == 0 {
            return addr;
        }
        self.scatter_rev
            .get(&addr)
            .copied()
            .unwrap_or(addr - h.seq as u64 * self.cfg.mtu as u64)
    }

    fn is_live(&self, pm: &PmDevice, head: u64) -> bool {
        let Ok(hb) = pm.read(head, HEADER_LEN) else {
            return false;
        };
        let Some(h) = Header::parse(&hb) else {
            return false;
        };
        if h.op == OpType::CommitVer {
            return false;
        }
        let Some(st) = self.shards.get(&h.shard) else {
            return false;
        };
        let Ok(kb) = pm.read(head + HEADER_LEN as u64, h.key_len as usize) else {
            return false;
        };
        st.index
            .get(&kb, key_hash(&kb), &PmProbe { pm })
            .is_some_and(|(a, _)| a == head)
    }

    fn live_blocks(&self, pm: &PmDevice, seg: u32) -> (u64, BTreeSet<u64>) {
        let base = self.segments.base(seg);
        let len = self.fill.get(&seg).copied().unwrap_or(self.segments.segment_size());
        let bytes = pm.read(base, len as usize).unwrap_or_default();
        let mut pos = 0usize;
        let mut valid = 0u64;
        let mut heads = BTreeSet::new();
        let mut cache: HashMap<u64, bool> = HashMap::new();
        while pos + HEADER_LEN <= bytes.len() {
            let Some((h, blen)) = parse_block(&bytes[pos..], self.cfg.mtu) else {
                break;
            };
            let addr = base + pos as u64;
            let head = self.head_of(addr, &h);
            let live = *cache.entry(head).or_insert_with(|| self.is_live(pm, head));
            if live {
                valid += blen as u64;
                heads.insert(head);
            }
            pos += blen;
        }
        (valid, heads)
    }

    /// Share of the segment occupied by entries the index still points at.
    pub fn utilization(&self, pm: &PmDevice, seg: u32) -> f64 {
        self.live_blocks(pm, seg).0 as f64 / self.segments.segment_size() as f64
    }

    /// Cleans Committed segments below the utilization threshold. Unless
    /// forced, runs only when free segments are scarce.
    pub fn gc_step(&mut self, pm: &mut PmDevice, force: bool) -> Result<Vec<u32>, KvError> {
        let total = self.segments.layout().count as f64;
        if !force && (self.segments.free_count() as f64) >= total * self.cfg.gc_free_watermark {
            return Ok(Vec::new());
        }
        self.stats.gc_runs += 1;
        let mut freed = Vec::new();
        for seg in self.segments.ids_in(SegState::Committed) {
            let (valid, heads) = self.live_blocks(pm, seg);
            if valid as f64 >= self.cfg.gc_threshold * self.segments.segment_size() as f64 {
                continue;
            }
            for head in heads {
                let Some(d) = self.read_entry(pm, head) else {
                    continue;
                };
                let mut bytes = Vec::with_capacity(d.encoded_len());
                for &(a, len) in &d.blocks {
                    bytes.extend_from_slice(&pm.read(a, len)?);
                }
                let new = self.append(pm, None, &bytes)?;
                let key = d.entry.key.clone();
                let st = self.shards.get_mut(&d.entry.shard).expect("live implies held");
                st.index.relocate(&key, key_hash(&key), head, new, &PmProbe { pm });
                if let Some(bl) = self.scatter.remove(&head) {
                    for (a, _) in bl {
                        self.scatter_rev.remove(&a);
                    }
                }
                self.stats.gc_relocated += 1;
                self.stats.gc_relocated_bytes += bytes.len() as u64;
            }
            let used = self.fill.remove(&seg).unwrap_or(self.segments.segment_size());
            self.segments.release(pm, seg, used)?;
            self.digest.forget(seg);
            freed.push(seg);
            self.stats.gc_freed += 1;
        }
        Ok(freed)
    }

    // ---- recovery helpers

    /// Every entry stored in segments matching `filter`, control-owned
    /// segments sharing one reassembler.
    pub fn collect_entries(&self, pm: &PmDevice, filter: impl Fn(u32, SegState, SegOwner) -> bool) -> Vec<DecodedEntry> {
        let mut out = Vec::new();
        let mut shared = Reassembler::new(self.cfg.mtu);
        for id in self.segments.ids_where(|_| true) {
            let m = self.segments.meta(id);
            if m.state == SegState::Free || !filter(id, m.state, m.owner) {
                continue;
            }
            if m.owner == SegOwner::Control {
                out.extend(self.scan_segment(pm, id, &mut shared).0);
            } else {
                let mut own = Reassembler::new(self.cfg.mtu);
                out.extend(self.scan_segment(pm, id, &mut own).0);
            }
        }
        out
    }

    /// Rebuilds held shards' indexes from every non-free segment, highest
    /// version wins; shard versions are raised above everything observed.
    pub fn rebuild_indexes(&mut self, pm: &PmDevice) -> usize {
        let entries = self.collect_entries(pm, |_, _, _| true);
        let mut n = 0;
        for d in &entries {
            if d.entry.op == OpType::CommitVer {
                self.digest.raise_commit_ver(d.entry.shard, d.entry.version);
                continue;
            }
            if self.index_decoded(pm, d) {
                n += 1;
            }
        }
        n
    }

    /// Closes every open log cursor (t-logs and clean), used on restart.
    pub fn reset_cursors(&mut self) {
        self.tlogs = vec![Cursor::default(); self.cfg.workers];
        self.clean = Cursor::default();
        self.outstanding.clear();
    }

    pub fn fill_of(&self, seg: u32) -> Option<u64> {
        self.fill.get(&seg).copied()
    }

    /// Addresses and sizes of live entries for one shard.
    pub fn shard_entries(&self, pm: &PmDevice, shard: u16) -> Vec<DecodedEntry> {
        let Some(st) = self.shards.get(&shard) else {
            return Vec::new();
        };
        let mut addrs = st.index.addrs();
        addrs.sort_unstable();
        addrs
            .into_iter()
            .filter_map(|a| self.read_entry(pm, a))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ServerConfig {
        ServerConfig {
            pm_capacity: 64 * 65536,
            segment_size: 65536,
            workers: 2,
            digest_actors: 2,
            shards: 4,
            index_buckets: 64,
            ..ServerConfig::default()
        }
    }

    fn put(s: &mut KvServer, pm: &mut PmDevice, w: usize, key: &[u8], value: &[u8]) -> u64 {
        let shard = s.shard_of_key(key);
        let v = s.next_version(shard).unwrap();
        let blocks = LogEntry::put(shard, v, key, value).encode(1024, &EntryLimits::default()).unwrap();
        let addr = s.append_tlog(pm, w, &blocks).unwrap();
        s.install(pm, shard, key, v, addr).unwrap();
        s.tlog_done(pm, addr).unwrap();
        addr
    }

    fn server() -> (KvServer, PmDevice) {
        let c = cfg();
        let mut s = KvServer::new(c).unwrap();
        for sh in 0..4 {
            s.add_shard(sh, Role::Primary);
        }
        (s, PmDevice::with_capacity(c.pm_capacity))
    }

    #[test]
    fn read_your_write_and_tombstone() {
        let (mut s, mut pm) = server();
        assert_eq!(s.get(&pm, b"missing").unwrap(), None);
        put(&mut s, &mut pm, 0, b"a", b"1");
        assert_eq!(s.get(&pm, b"a").unwrap(), Some(b"1".to_vec()));
        let shard = s.shard_of_key(b"a");
        let v = s.next_version(shard).unwrap();
        let blocks = LogEntry::del(shard, v, b"a").encode(1024, &EntryLimits::default()).unwrap();
        let addr = s.append_tlog(&mut pm, 1, &blocks).unwrap();
        s.install(&pm, shard, b"a", v, addr).unwrap();
        assert_eq!(s.get(&pm, b"a").unwrap(), None);
    }

    #[test]
    fn tlog_segment_commits_after_last_ack() {
        let (mut s, mut pm) = server();
        let shard = s.shard_of_key(b"k");
        let mut pending = Vec::new();
        // 64 KB segment, 1 KB entries: the 65th entry opens a new segment.
        for i in 0..65u64 {
            let v = s.next_version(shard).unwrap();
            let blocks = LogEntry::put(shard, v, b"k", &vec![i as u8; 990]).encode(1024, &EntryLimits::default()).unwrap();
            pending.push(s.append_tlog(&mut pm, 0, &blocks).unwrap());
        }
        let first = s.segments.layout().id_of(pending[0]).unwrap();
        assert_eq!(s.segments.meta(first).state, SegState::Using);
        for a in &pending[..64] {
            s.tlog_done(&mut pm, *a).unwrap();
        }
        assert_eq!(s.segments.meta(first).state, SegState::Committed);
    }

    #[test]
    fn gc_preserves_values() {
        let (mut s, mut pm) = server();
        for round in 0..3u8 {
            for i in 0..200u32 {
                let k = format!("key{i}");
                put(&mut s, &mut pm, (i % 2) as usize, k.as_bytes(), &vec![round; 100 + (i % 50) as usize]);
            }
        }
        let before: Vec<_> = (0..200).map(|i| s.get(&pm, format!("key{i}").as_bytes()).unwrap()).collect();
        // Seal every log so its segments can commit.
        s.reset_cursors();
        for id in s.segments.ids_in(SegState::Using) {
            s.segments.transition(&mut pm, id, SegState::Committed).unwrap();
        }
        let freed = s.gc_step(&mut pm, true).unwrap();
        assert!(!freed.is_empty());
        let after: Vec<_> = (0..200).map(|i| s.get(&pm, format!("key{i}").as_bytes()).unwrap()).collect();
        assert_eq!(before, after);
        assert!(s.stats().gc_relocated > 0);
    }

    #[test]
    fn recover_rebuilds_highest_version() {
        let (mut s, mut pm) = server();
        put(&mut s, &mut pm, 0, b"x", b"old");
        put(&mut s, &mut pm, 1, b"x", b"new");
        put(&mut s, &mut pm, 0, b"y", b"1");
        pm.crash();
        let mut r = KvServer::recover(cfg(), &pm).unwrap();
        for sh in 0..4 {
            r.add_shard(sh, Role::Primary);
        }
        r.rebuild_indexes(&pm);
        assert_eq!(r.get(&pm, b"x").unwrap(), Some(b"new".to_vec()));
        assert_eq!(r.get(&pm, b"y").unwrap(), Some(b"1".to_vec()));
        let sh = r.shard_of_key(b"x");
        assert!(r.shards[&sh].shard_version >= 2);
    }
}
