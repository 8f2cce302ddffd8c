//! One-sided persistent writes that land sequentially in receiver PM.
//!
//! A sender issues `SEND(payload)` followed by a 1-byte `READ` on the same
//! pair; the READ completes only after the SEND's data is in PM, so its
//! completion is the persistence ack. The receiver side owns a multi-packet
//! SRQ whose buffers are PM segments. A control loop keeps the SRQ fed and
//! decides when a segment is no longer being written.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::{
    Completion, CompletionOp, CompletionStatus, CqId, CqMode, Fabric, FabricError, NodeId, QpId,
    SrqId, SrqKind, WorkRequest,
};
use crate::pm::PmDevice;
use crate::{Time, NS_PER_MS};

/// Registry name of the receive queue; one instance per receiver.
pub const ROWAN_SRQ_NAME: &str = "rowan.blog";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RowanError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("receiver already has a rowan instance")]
    AlreadyOpen,
    #[error("no free segment available")]
    Allocation,
    #[error("payload length {0} is not a positive multiple of 64")]
    PayloadLength(usize),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowanConfig {
    pub quiescence: Time,
    pub retry_timeout: Time,
    pub initial_post: usize,
    pub batch: usize,
    pub stride: u32,
}

impl Default for RowanConfig {
    fn default() -> Self {
        Self {
            quiescence: 2 * NS_PER_MS,
            retry_timeout: NS_PER_MS,
            initial_post: 512,
            batch: 128,
            stride: 64,
        }
    }
}

impl RowanConfig {
    pub fn validate(&self) -> Result<(), RowanError> {
        if self.retry_timeout >= self.quiescence {
            return Err(RowanError::Config(format!(
                "retry timeout {}ns must be shorter than quiescence wait {}ns",
                self.retry_timeout, self.quiescence
            )));
        }
        if self.initial_post == 0 || self.batch == 0 || self.batch > self.initial_post {
            return Err(RowanError::Config(
                "need 0 < batch <= initial_post".into(),
            ));
        }
        if self.stride == 0 || self.stride % 64 != 0 {
            return Err(RowanError::Config("stride must be a multiple of 64".into()));
        }
        Ok(())
    }
}

/// Where the receiver's segments come from.
pub trait SegmentSource {
    fn segment_size(&self) -> u64;
    /// Takes a Free segment for the log (Free -> Using).
    fn allocate(&mut self, pm: &mut PmDevice) -> Option<(u32, u64)>;
    /// Using -> Used.
    fn mark_used(&mut self, pm: &mut PmDevice, id: u32);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PostedSegment {
    pub id: u32,
    pub base: u64,
    seq: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiverStats {
    pub segments_posted: u64,
    pub segments_used: u64,
    pub probes: u64,
    pub starved_steps: u64,
}

#[derive(Debug)]
pub struct RowanReceiver {
    pub node: NodeId,
    pub srq: SrqId,
    pub cq: CqId,
    config: RowanConfig,
    posted: VecDeque<PostedSegment>,
    next_seq: u64,
    probe_seq: u64,
    /// Segments with `seq < boundary` were seen superseded at the given time.
    marks: VecDeque<(u64, Time)>,
    stats: ReceiverStats,
}

impl RowanReceiver {
    pub fn open(
        fabric: &mut Fabric,
        node: NodeId,
        source: &mut dyn SegmentSource,
        config: RowanConfig,
    ) -> Result<Self, RowanError> {
        config.validate()?;
        if fabric.named_srq(node, ROWAN_SRQ_NAME).is_some() {
            return Err(RowanError::AlreadyOpen);
        }
        let seg = source.segment_size();
        if seg % config.stride as u64 != 0 {
            return Err(RowanError::Config("segment size must be a multiple of the stride".into()));
        }
        let cq = fabric.create_cq(CqMode::Ring { capacity: 1024 });
        let srq = fabric.create_srq(node, SrqKind::MultiPacket { stride: config.stride }, cq)?;
        let mut r = Self {
            node,
            srq,
            cq,
            config,
            posted: VecDeque::new(),
            next_seq: 0,
            probe_seq: 1,
            marks: VecDeque::new(),
            stats: ReceiverStats::default(),
        };
        if r.post_batch(fabric, source, config.initial_post)? == 0 {
            return Err(RowanError::Allocation);
        }
        fabric.register_named_srq(node, ROWAN_SRQ_NAME, srq)?;
        Ok(r)
    }

    pub fn config(&self) -> &RowanConfig {
        &self.config
    }

    pub fn stats(&self) -> ReceiverStats {
        self.stats
    }

    pub fn posted(&self) -> impl Iterator<Item = &PostedSegment> {
        self.posted.iter()
    }

    fn post_batch(
        &mut self,
        fabric: &mut Fabric,
        source: &mut dyn SegmentSource,
        n: usize,
    ) -> Result<usize, RowanError> {
        let mut fresh = Vec::with_capacity(n);
        for _ in 0..n {
            match source.allocate(fabric.pm_mut(self.node)) {
                Some(s) => fresh.push(s),
                None => break,
            }
        }
        fresh.sort_by_key(|&(_, base)| base);
        let len = source.segment_size();
        for &(id, base) in &fresh {
            fabric.pm_mut(self.node).write(base, &[0u8; 8]).map_err(FabricError::from)?;
            fabric.post_recv(self.srq, base, len)?;
            self.posted.push_back(PostedSegment {
                id,
                base,
                seq: self.next_seq,
            });
            self.next_seq += 1;
            self.stats.segments_posted += 1;
        }
        Ok(fresh.len())
    }

    /// One iteration of the control loop. Returns segments that became Used.
    pub fn control_step(
        &mut self,
        fabric: &mut Fabric,
        source: &mut dyn SegmentSource,
        now: Time,
    ) -> Result<Vec<u32>, RowanError> {
        let front = self.posted.front().map_or(self.next_seq, |p| p.seq);
        self.probe_seq = self.probe_seq.max(front + 1);
        while let Some(seg) = self.posted.get((self.probe_seq - front) as usize) {
            self.stats.probes += 1;
            if fabric.pm(self.node).read_u64(seg.base).map_err(FabricError::from)? == 0 {
                break;
            }
            self.marks.push_back((seg.seq, now));
            self.probe_seq += 1;
        }

        let mut used = Vec::new();
        while let Some(&(boundary, seen)) = self.marks.front() {
            if now < seen + self.config.quiescence {
                break;
            }
            self.marks.pop_front();
            while self.posted.front().is_some_and(|p| p.seq < boundary) {
                let p = self.posted.pop_front().expect("checked");
                source.mark_used(fabric.pm_mut(self.node), p.id);
                self.stats.segments_used += 1;
                used.push(p.id);
            }
        }

        let deficit = self.config.initial_post.saturating_sub(self.posted.len());
        if deficit >= self.config.batch {
            let got = self.post_batch(fabric, source, self.config.batch)?;
            if got < self.config.batch {
                self.stats.starved_steps += 1;
            }
        } else if self.posted.is_empty() {
            self.stats.starved_steps += 1;
        }
        Ok(used)
    }

    /// Posted segments the receiver may still be writing, oldest first.
    pub fn live_segments(&self) -> Vec<u32> {
        self.posted.iter().map(|p| p.id).collect()
    }

    pub fn close(self, fabric: &mut Fabric) {
        fabric.unregister_named_srq(self.node, ROWAN_SRQ_NAME);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowanAck {
    pub work_id: u64,
    pub persisted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SenderStats {
    pub writes: u64,
    pub acks: u64,
    pub retries: u64,
    pub failures: u64,
}

#[derive(Debug, Clone)]
struct Pending {
    qp: QpId,
    payload: Vec<u8>,
    issued: Time,
}

#[derive(Debug)]
pub struct RowanSender {
    retry_timeout: Time,
    pending: BTreeMap<u64, Pending>,
    by_time: BTreeSet<(Time, u64)>,
    stats: SenderStats,
}

impl RowanSender {
    pub fn new(retry_timeout: Time) -> Self {
        Self {
            retry_timeout,
            pending: BTreeMap::new(),
            by_time: BTreeSet::new(),
            stats: SenderStats::default(),
        }
    }

    pub fn stats(&self) -> SenderStats {
        self.stats
    }

    pub fn outstanding(&self) -> usize {
        self.pending.len()
    }

    fn post(fabric: &mut Fabric, qp: QpId, work_id: u64, payload: Vec<u8>, now: Time) -> Result<(), FabricError> {
        fabric.post_send(
            qp,
            vec![WorkRequest::send(work_id, payload, false), WorkRequest::read(work_id, 0, 1)],
            now,
        )
    }

    pub fn write(
        &mut self,
        fabric: &mut Fabric,
        qp: QpId,
        payload: Vec<u8>,
        work_id: u64,
        now: Time,
    ) -> Result<(), RowanError> {
        if payload.is_empty() || payload.len() % 64 != 0 {
            return Err(RowanError::PayloadLength(payload.len()));
        }
        Self::post(fabric, qp, work_id, payload.clone(), now)?;
        self.stats.writes += 1;
        self.pending.insert(work_id, Pending { qp, payload, issued: now });
        self.by_time.insert((now, work_id));
        Ok(())
    }

    /// Feeds a sender-side completion. Returns an ack for the first
    /// completion of a pending write; duplicates from retries are ignored.
    pub fn on_completion(&mut self, c: &Completion) -> Option<RowanAck> {
        let persisted = match (c.op, c.status) {
            (CompletionOp::Read, CompletionStatus::Ok) => true,
            (_, CompletionStatus::Ok) => return None,
            _ => false,
        };
        let p = self.pending.remove(&c.work_id)?;
        self.by_time.remove(&(p.issued, c.work_id));
        if persisted {
            self.stats.acks += 1;
        } else {
            self.stats.failures += 1;
        }
        Some(RowanAck {
            work_id: c.work_id,
            persisted,
        })
    }

    pub fn next_retry(&self) -> Option<Time> {
        self.by_time.first().map(|&(t, _)| t + self.retry_timeout)
    }

    /// Re-issues every write older than the retry timeout, keeping its
    /// work id. Writes whose pair is gone are dropped and reported.
    pub fn retry_due(&mut self, fabric: &mut Fabric, now: Time) -> Vec<u64> {
        let mut failed = Vec::new();
        while let Some(&(issued, id)) = self.by_time.first() {
            if issued + self.retry_timeout > now {
                break;
            }
            self.by_time.pop_first();
            let p = self.pending.get_mut(&id).expect("indexed");
            match Self::post(fabric, p.qp, id, p.payload.clone(), now) {
                Ok(()) => {
                    p.issued = now;
                    self.stats.retries += 1;
                    self.by_time.insert((now, id));
                }
                Err(_) => {
                    self.pending.remove(&id);
                    self.stats.failures += 1;
                    failed.push(id);
                }
            }
        }
        failed
    }

    /// Forgets writes on a pair that was torn down.
    pub fn abandon(&mut self, qp: QpId) -> Vec<u64> {
        let gone: Vec<u64> = self
            .pending
            .iter()
            .filter(|(_, p)| p.qp == qp)
            .map(|(&id, _)| id)
            .collect();
        for id in &gone {
            let p = self.pending.remove(id).expect("present");
            self.by_time.remove(&(p.issued, *id));
        }
        gone
    }
}

/// Receiver-side log used by the fetch-and-add + WRITE baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaaLog {
    pub counter_addr: u64,
    pub base: u64,
    pub len: u64,
}

/// Baseline: reserve space with a remote FAA on a tail counter, then WRITE
/// into the reserved range and READ for persistence. Two round trips.
#[derive(Debug)]
pub struct FaaWriteSender {
    log: FaaLog,
    reserving: BTreeMap<u64, (QpId, Vec<u8>)>,
    writing: BTreeSet<u64>,
    stats: SenderStats,
}

impl FaaWriteSender {
    pub fn new(log: FaaLog) -> Self {
        Self {
            log,
            reserving: BTreeMap::new(),
            writing: BTreeSet::new(),
            stats: SenderStats::default(),
        }
    }

    pub fn stats(&self) -> SenderStats {
        self.stats
    }

    pub fn write(
        &mut self,
        fabric: &mut Fabric,
        qp: QpId,
        payload: Vec<u8>,
        work_id: u64,
        now: Time,
    ) -> Result<(), RowanError> {
        if payload.is_empty() || payload.len() % 64 != 0 {
            return Err(RowanError::PayloadLength(payload.len()));
        }
        fabric.post_send(
            qp,
            vec![WorkRequest::fetch_add(work_id, self.log.counter_addr, payload.len() as u64)],
            now,
        )?;
        self.stats.writes += 1;
        self.reserving.insert(work_id, (qp, payload));
        Ok(())
    }

    pub fn on_completion(&mut self, fabric: &mut Fabric, c: &Completion, now: Time) -> Option<RowanAck> {
        match c.op {
            CompletionOp::FetchAdd => {
                let (qp, payload) = self.reserving.remove(&c.work_id)?;
                let old = u64::from_le_bytes(c.data.as_ref()?.as_slice().try_into().ok()?);
                if c.status != CompletionStatus::Ok || old + payload.len() as u64 > self.log.len {
                    self.stats.failures += 1;
                    return Some(RowanAck {
                        work_id: c.work_id,
                        persisted: false,
                    });
                }
                let addr = self.log.base + old;
                let posted = fabric.post_send(
                    qp,
                    vec![
                        WorkRequest::write(c.work_id, addr, payload, false),
                        WorkRequest::read(c.work_id, addr, 1),
                    ],
                    now,
                );
                if posted.is_err() {
                    self.stats.failures += 1;
                    return Some(RowanAck {
                        work_id: c.work_id,
                        persisted: false,
                    });
                }
                self.writing.insert(c.work_id);
                None
            }
            CompletionOp::Read if self.writing.remove(&c.work_id) => {
                let persisted = c.status == CompletionStatus::Ok;
                if persisted {
                    self.stats.acks += 1;
                }
                Some(RowanAck {
                    work_id: c.work_id,
                    persisted,
                })
            }
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fabric::{FabricConfig, QpKind};
    use crate::pm::PmConfig;

    const SEG: u64 = 64 * 1024;

    /// Plain bump allocator over fixed-size segments starting at `SEG`.
    struct Segs {
        free: BTreeSet<u32>,
        used: Vec<u32>,
    }

    impl Segs {
        fn new(n: u32) -> Self {
            Self {
                free: (1..=n).collect(),
                used: Vec::new(),
            }
        }
    }

    impl SegmentSource for Segs {
        fn segment_size(&self) -> u64 {
            SEG
        }
        fn allocate(&mut self, _pm: &mut PmDevice) -> Option<(u32, u64)> {
            let id = self.free.pop_first()?;
            Some((id, id as u64 * SEG))
        }
        fn mark_used(&mut self, _pm: &mut PmDevice, id: u32) {
            self.used.push(id);
        }
    }

    fn cfg(initial_post: usize, batch: usize) -> RowanConfig {
        RowanConfig {
            initial_post,
            batch,
            ..RowanConfig::default()
        }
    }

    struct Rig {
        fabric: Fabric,
        rx: RowanReceiver,
        segs: Segs,
        qps: Vec<QpId>,
        cqs: Vec<CqId>,
    }

    fn rig(senders: usize, initial_post: usize, batch: usize) -> Rig {
        let mut fabric = Fabric::new(FabricConfig::default());
        let recv = fabric.add_node(PmConfig::with_capacity(64 << 20));
        let mut segs = Segs::new(64);
        let rx = RowanReceiver::open(&mut fabric, recv, &mut segs, cfg(initial_post, batch)).unwrap();
        let rcq = fabric.create_cq(CqMode::Fifo { capacity: None });
        let mut qps = Vec::new();
        let mut cqs = Vec::new();
        for _ in 0..senders {
            let n = fabric.add_node(PmConfig::with_capacity(1 << 20));
            let cq = fabric.create_cq(CqMode::Fifo { capacity: None });
            let (q, _) = fabric
                .connect(QpKind::ReliableConnected, n, cq, None, recv, rcq, Some(rx.srq))
                .unwrap();
            qps.push(q);
            cqs.push(cq);
        }
        Rig {
            fabric,
            rx,
            segs,
            qps,
            cqs,
        }
    }

    #[test]
    fn config_relation_is_enforced() {
        let bad = RowanConfig {
            retry_timeout: 2 * NS_PER_MS,
            ..RowanConfig::default()
        };
        assert!(matches!(bad.validate(), Err(RowanError::Config(_))));
        assert!(RowanConfig::default().validate().is_ok());
    }

    #[test]
    fn open_posts_in_address_order() {
        let r = rig(0, 4, 2);
        let bases: Vec<u64> = r.rx.posted().map(|p| p.base).collect();
        assert_eq!(bases, vec![SEG, 2 * SEG, 3 * SEG, 4 * SEG]);
        assert_eq!(r.fabric.srq(r.rx.srq).posted(), 4);
    }

    #[test]
    fn open_twice_rejected_and_empty_source_fails() {
        let mut r = rig(0, 4, 2);
        let node = r.rx.node;
        let err = RowanReceiver::open(&mut r.fabric, node, &mut r.segs, cfg(4, 2)).unwrap_err();
        assert_eq!(err, RowanError::AlreadyOpen);

        let mut f = Fabric::new(FabricConfig::default());
        let n = f.add_node(PmConfig::with_capacity(1 << 20));
        let mut empty = Segs::new(0);
        assert_eq!(
            RowanReceiver::open(&mut f, n, &mut empty, cfg(4, 2)).unwrap_err(),
            RowanError::Allocation
        );
    }

    #[test]
    fn two_senders_share_one_xpline() {
        let mut r = rig(2, 4, 2);
        r.fabric.pm_mut(r.rx.node).flush_all();
        r.fabric.pm_mut(r.rx.node).reset_counters();
        let mut senders = [RowanSender::new(NS_PER_MS), RowanSender::new(NS_PER_MS)];
        for (i, s) in senders.iter_mut().enumerate() {
            s.write(&mut r.fabric, r.qps[i], vec![i as u8 + 1; 64], i as u64, 0).unwrap();
        }
        let mut acks = 0;
        for c in r.fabric.deliver_step(NS_PER_MS) {
            for s in senders.iter_mut() {
                if s.on_completion(&c).is_some_and(|a| a.persisted) {
                    acks += 1;
                }
            }
        }
        assert_eq!(acks, 2);
        let pm = r.fabric.pm_mut(r.rx.node);
        pm.flush_all();
        // 2 x 64B plus nothing else: one line, half dirty.
        assert_eq!(pm.counters().request_bytes, 128);
        assert_eq!(pm.counters().media_bytes, 256);
        let a = pm.read(SEG, 1).unwrap()[0];
        let b = pm.read(SEG + 64, 1).unwrap()[0];
        assert_eq!([a.min(b), a.max(b)], [1, 2]);
    }

    #[test]
    fn two_full_lines_have_unit_dlwa() {
        let mut r = rig(2, 4, 2);
        r.fabric.pm_mut(r.rx.node).flush_all();
        r.fabric.pm_mut(r.rx.node).reset_counters();
        let mut s = RowanSender::new(NS_PER_MS);
        for i in 0..8 {
            s.write(&mut r.fabric, r.qps[i % 2], vec![7; 64], i as u64, 0).unwrap();
        }
        r.fabric.deliver_step(NS_PER_MS);
        let pm = r.fabric.pm_mut(r.rx.node);
        pm.flush_all();
        assert_eq!(pm.dlwa().unwrap(), 1.0);
    }

    #[test]
    fn large_payload_one_ack() {
        let mut r = rig(1, 4, 2);
        let mut s = RowanSender::new(NS_PER_MS);
        s.write(&mut r.fabric, r.qps[0], vec![3; 2048], 9, 0).unwrap();
        let acks: Vec<_> = r
            .fabric
            .deliver_step(NS_PER_MS)
            .iter()
            .filter_map(|c| s.on_completion(c))
            .collect();
        assert_eq!(acks, vec![RowanAck { work_id: 9, persisted: true }]);
        assert_eq!(r.fabric.pm(r.rx.node).read(SEG, 2048).unwrap(), vec![3; 2048]);
        assert!(r.fabric.poll_cq(r.cqs[0], 8).len() == 1);
    }

    #[test]
    fn payload_must_be_stride_multiple() {
        let mut r = rig(1, 4, 2);
        let mut s = RowanSender::new(NS_PER_MS);
        assert_eq!(
            s.write(&mut r.fabric, r.qps[0], vec![0; 100], 1, 0),
            Err(RowanError::PayloadLength(100))
        );
    }

    #[test]
    fn control_loop_identifies_used_segments() {
        let mut r = rig(1, 6, 2);
        let mut s = RowanSender::new(NS_PER_MS);
        assert!(r.rx.control_step(&mut r.fabric, &mut r.segs, 0).unwrap().is_empty());
        // Fill three segments and start a fourth.
        let per_seg = SEG as usize / 1024;
        for i in 0..(3 * per_seg + 1) {
            s.write(&mut r.fabric, r.qps[0], vec![1; 1024], i as u64, 0).unwrap();
        }
        r.fabric.deliver_step(NS_PER_MS);
        let t = NS_PER_MS;
        assert!(r.rx.control_step(&mut r.fabric, &mut r.segs, t).unwrap().is_empty());
        let used = r.rx.control_step(&mut r.fabric, &mut r.segs, t + 2 * NS_PER_MS).unwrap();
        assert_eq!(used, vec![1, 2, 3]);
        assert_eq!(r.segs.used, vec![1, 2, 3]);
        // Deficit 3 >= batch 2: one batch reposted.
        assert_eq!(r.rx.posted().count(), 5);
    }

    #[test]
    fn retry_keeps_work_id_and_duplicates_are_ignored() {
        let mut r = rig(1, 4, 2);
        let mut s = RowanSender::new(NS_PER_MS);
        s.write(&mut r.fabric, r.qps[0], vec![5; 64], 42, 0).unwrap();
        assert_eq!(s.next_retry(), Some(NS_PER_MS));
        assert!(s.retry_due(&mut r.fabric, NS_PER_MS).is_empty());
        assert_eq!(s.stats().retries, 1);
        let acks: Vec<_> = r
            .fabric
            .deliver_step(3 * NS_PER_MS)
            .iter()
            .filter_map(|c| s.on_completion(c))
            .collect();
        assert_eq!(acks.len(), 1);
        assert_eq!(acks[0].work_id, 42);
        // Both copies landed.
        assert_eq!(r.fabric.pm(r.rx.node).read(SEG + 64, 1).unwrap(), vec![5]);
    }

    #[test]
    fn faa_baseline_lands_same_bytes_with_more_round_trips() {
        let mut fabric = Fabric::new(FabricConfig::default());
        let recv = fabric.add_node(PmConfig::with_capacity(1 << 20));
        let snd = fabric.add_node(PmConfig::with_capacity(1 << 20));
        let cq = fabric.create_cq(CqMode::Fifo { capacity: None });
        let rcq = fabric.create_cq(CqMode::Fifo { capacity: None });
        let (q, _) = fabric
            .connect(QpKind::ReliableConnected, snd, cq, None, recv, rcq, None)
            .unwrap();
        let log = FaaLog {
            counter_addr: 0,
            base: 4096,
            len: 65536,
        };
        let mut s = FaaWriteSender::new(log);
        s.write(&mut fabric, q, vec![1; 64], 1, 0).unwrap();
        s.write(&mut fabric, q, vec![2; 128], 2, 0).unwrap();
        let mut acked = 0;
        let mut now = 0;
        while let Some(t) = fabric.next_event_time() {
            now = now.max(t);
            for c in fabric.deliver_step(now) {
                if s.on_completion(&mut fabric, &c, now).is_some() {
                    acked += 1;
                }
            }
        }
        assert_eq!(acked, 2);
        assert_eq!(fabric.stats().round_trips, 4);
        assert_eq!(fabric.pm(recv).read(4096, 64).unwrap(), vec![1; 64]);
        assert_eq!(fabric.pm(recv).read(4096 + 64, 128).unwrap(), vec![2; 128]);
    }
}
