//! Simulated RDMA fabric.
//!
//! Nodes own a [`PmDevice`]. Queue pairs carry SEND/WRITE/READ/FAA work
//! requests; SENDs land in shared receive queues, either one buffer per
//! message, multi-packet (stride-aligned appends into large buffers), or a
//! DRAM inbox whose payload is handed to the receiver CPU.
//!
//! Everything in flight is ordered by `(arrival, tiebreak)`. Arrival is the
//! post time plus a base latency and seeded jitter; reliable-connected pairs
//! clamp arrivals so they are strictly increasing per pair, which keeps
//! per-pair FIFO order while letting different pairs interleave in a
//! seed-dependent way.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pm::{PmConfig, PmDevice, PmError};
use crate::Time;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub u32);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QpId(pub u32);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SrqId(pub u32);
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CqId(pub u32);

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FabricError {
    #[error("queue pair {0:?} is not established")]
    NotEstablished(QpId),
    #[error("unknown {0}")]
    Unknown(&'static str),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("node {0:?} is down")]
    NodeDown(NodeId),
    #[error(transparent)]
    Pm(#[from] PmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FabricConfig {
    pub mtu: u32,
    /// One-way latency; a round trip is twice this (2µs by default).
    pub base_latency: Time,
    /// Upper bound of the uniform per-packet jitter.
    pub jitter: Time,
    /// Extra delay charged to atomics.
    pub faa_penalty: Time,
    /// Probability that a sender-side completion is lost.
    pub ack_drop_probability: f64,
    pub seed: u64,
    pub trace: bool,
}

impl Default for FabricConfig {
    fn default() -> Self {
        Self {
            mtu: 1024,
            base_latency: 1_000,
            jitter: 0,
            faa_penalty: 1_500,
            ack_drop_probability: 0.0,
            seed: 0,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpKind {
    ReliableConnected,
    UnreliableDatagram,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verb {
    Send { payload: Vec<u8> },
    Write { remote_addr: u64, payload: Vec<u8> },
    Read { remote_addr: u64, len: u32 },
    FetchAdd { remote_addr: u64, add: u64 },
}

impl Verb {
    fn name(&self) -> &'static str {
        match self {
            Verb::Send { .. } => "SEND",
            Verb::Write { .. } => "WRITE",
            Verb::Read { .. } => "READ",
            Verb::FetchAdd { .. } => "FAA",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkRequest {
    pub work_id: u64,
    pub verb: Verb,
    pub signaled: bool,
}

impl WorkRequest {
    pub fn send(work_id: u64, payload: Vec<u8>, signaled: bool) -> Self {
        Self {
            work_id,
            verb: Verb::Send { payload },
            signaled,
        }
    }

    pub fn write(work_id: u64, remote_addr: u64, payload: Vec<u8>, signaled: bool) -> Self {
        Self {
            work_id,
            verb: Verb::Write {
                remote_addr,
                payload,
            },
            signaled,
        }
    }

    pub fn read(work_id: u64, remote_addr: u64, len: u32) -> Self {
        Self {
            work_id,
            verb: Verb::Read { remote_addr, len },
            signaled: true,
        }
    }

    pub fn fetch_add(work_id: u64, remote_addr: u64, add: u64) -> Self {
        Self {
            work_id,
            verb: Verb::FetchAdd { remote_addr, add },
            signaled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompletionStatus {
    Ok,
    RecvBufferTooSmall,
    RetryExceeded,
    RemoteAccess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompletionOp {
    Send,
    Write,
    Read,
    FetchAdd,
    Recv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub addr: u64,
    pub len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub work_id: u64,
    pub qp: QpId,
    pub cq: CqId,
    pub op: CompletionOp,
    pub status: CompletionStatus,
    pub byte_len: u32,
    /// Where received data landed (receive completions on PM-backed queues).
    pub placement: Vec<Placement>,
    /// READ result, FAA prior value, or a DRAM-inbox payload.
    pub data: Option<Vec<u8>>,
    pub time: Time,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CqMode {
    /// Consumed by polling; overflowing a bounded queue is an error.
    Fifo { capacity: Option<usize> },
    /// Producer overwrites the oldest entry and never blocks.
    Ring { capacity: usize },
}

#[derive(Debug)]
pub struct CompletionQueue {
    pub id: CqId,
    pub mode: CqMode,
    entries: VecDeque<Completion>,
    pub overrun: bool,
    pub produced: u64,
    pub overwritten: u64,
    pub polls: u64,
}

impl CompletionQueue {
    fn push(&mut self, c: Completion) {
        self.produced += 1;
        match self.mode {
            CqMode::Fifo { capacity } => {
                if capacity.is_some_and(|cap| self.entries.len() >= cap) {
                    self.overrun = true;
                    return;
                }
                self.entries.push_back(c);
            }
            CqMode::Ring { capacity } => {
                if self.entries.len() >= capacity {
                    self.entries.pop_front();
                    self.overwritten += 1;
                }
                self.entries.push_back(c);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SrqKind {
    /// Many messages per buffer, each starting at a stride boundary.
    MultiPacket { stride: u32 },
    /// One message per posted buffer.
    SingleBuffer,
    /// Payloads are delivered to the receiver CPU, not to PM.
    DramInbox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveBuffer {
    pub base: u64,
    pub len: u64,
    pub next_offset: u64,
}

#[derive(Debug)]
pub struct SharedReceiveQueue {
    pub id: SrqId,
    pub node: NodeId,
    pub kind: SrqKind,
    pub cq: CqId,
    buffers: VecDeque<(u64, u64)>,
    pub active: Option<ActiveBuffer>,
    /// Base addresses in the order the receiver consumed them.
    pub consumed: Vec<u64>,
}

impl SharedReceiveQueue {
    pub fn posted(&self) -> usize {
        self.buffers.len()
    }

    /// Multi-packet placement: append at the next stride boundary of the
    /// active buffer, popping the next posted buffer when it does not fit.
    fn place_stride(&mut self, stride: u64, len: u64) -> Result<u64, PlaceError> {
        let need = len.div_ceil(stride) * stride;
        if let Some(a) = &mut self.active {
            if a.next_offset + need <= a.len {
                let addr = a.base + a.next_offset;
                a.next_offset += need;
                return Ok(addr);
            }
        }
        let Some(&(base, blen)) = self.buffers.front() else {
            return Err(PlaceError::NoBuffer);
        };
        if need > blen {
            return Err(PlaceError::TooLarge);
        }
        self.buffers.pop_front();
        self.consumed.push(base);
        self.active = Some(ActiveBuffer {
            base,
            len: blen,
            next_offset: need,
        });
        Ok(base)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlaceError {
    NoBuffer,
    TooLarge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpState {
    Ready,
    Error,
    Destroyed,
}

#[derive(Debug)]
pub struct QueuePair {
    pub id: QpId,
    pub kind: QpKind,
    pub node: NodeId,
    pub peer: QpId,
    pub peer_node: NodeId,
    pub cq: CqId,
    pub srq: Option<SrqId>,
    pub state: QpState,
    pub mtu: u32,
    last_arrival: Time,
    next_msg: u64,
}

#[derive(Debug, Clone)]
enum Body {
    SendFrag {
        data: Vec<u8>,
        index: u32,
        count: u32,
        total: u32,
    },
    Write {
        addr: u64,
        data: Vec<u8>,
    },
    Read {
        addr: u64,
        len: u32,
    },
    FetchAdd {
        addr: u64,
        add: u64,
    },
}

#[derive(Debug, Clone)]
struct Packet {
    src: QpId,
    dst: QpId,
    msg: u64,
    work_id: u64,
    signaled: bool,
    body: Body,
}

type PacketKey = (Time, u64, u64);

/// Multi-fragment receive in progress.
#[derive(Debug, Default)]
struct Reassembly {
    placement: Vec<Placement>,
    data: Vec<u8>,
    single: Option<(u64, u64, u64)>,
    failed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub time: Time,
    pub qp: u32,
    pub verb: String,
    pub bytes: u32,
    pub dest_addr: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FabricStats {
    pub sends_posted: u64,
    pub send_bytes_posted: u64,
    pub sends_completed: u64,
    pub send_bytes_landed: u64,
    pub packets_delivered: u64,
    pub round_trips: u64,
    pub acks_dropped: u64,
    /// Deliveries that need the receiver CPU to consume them.
    pub receiver_cpu_items: u64,
}

#[derive(Debug)]
struct Node {
    pm: PmDevice,
    alive: bool,
    named_srqs: BTreeMap<String, SrqId>,
}

pub struct Fabric {
    config: FabricConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
    qps: Vec<QueuePair>,
    srqs: Vec<SharedReceiveQueue>,
    cqs: Vec<CompletionQueue>,
    inflight: BTreeMap<PacketKey, Packet>,
    acks: BTreeMap<(Time, u64), Completion>,
    stalled: BTreeMap<QpId, VecDeque<Packet>>,
    rearm: bool,
    reassembly: BTreeMap<(QpId, u64), Reassembly>,
    seq: u64,
    stats: FabricStats,
    trace: Vec<TraceRow>,
}

impl Fabric {
    pub fn new(config: FabricConfig) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            nodes: Vec::new(),
            qps: Vec::new(),
            srqs: Vec::new(),
            cqs: Vec::new(),
            inflight: BTreeMap::new(),
            acks: BTreeMap::new(),
            stalled: BTreeMap::new(),
            rearm: false,
            reassembly: BTreeMap::new(),
            seq: 0,
            stats: FabricStats::default(),
            trace: Vec::new(),
        }
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn stats(&self) -> FabricStats {
        self.stats
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn write_trace_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        if self.trace.is_empty() {
            w.write_record(["time", "qp", "verb", "bytes", "dest_addr"])?;
        }
        for r in &self.trace {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn add_node(&mut self, pm: PmConfig) -> NodeId {
        self.nodes.push(Node {
            pm: PmDevice::new(pm),
            alive: true,
            named_srqs: BTreeMap::new(),
        });
        NodeId(self.nodes.len() as u32 - 1)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn pm(&self, node: NodeId) -> &PmDevice {
        &self.nodes[node.0 as usize].pm
    }

    pub fn pm_mut(&mut self, node: NodeId) -> &mut PmDevice {
        &mut self.nodes[node.0 as usize].pm
    }

    pub fn is_alive(&self, node: NodeId) -> bool {
        self.nodes[node.0 as usize].alive
    }

    pub fn create_cq(&mut self, mode: CqMode) -> CqId {
        let id = CqId(self.cqs.len() as u32);
        self.cqs.push(CompletionQueue {
            id,
            mode,
            entries: VecDeque::new(),
            overrun: false,
            produced: 0,
            overwritten: 0,
            polls: 0,
        });
        id
    }

    pub fn cq(&self, cq: CqId) -> &CompletionQueue {
        &self.cqs[cq.0 as usize]
    }

    pub fn create_srq(&mut self, node: NodeId, kind: SrqKind, cq: CqId) -> Result<SrqId, FabricError> {
        if let SrqKind::MultiPacket { stride } = kind {
            if stride == 0 {
                return Err(FabricError::Argument("stride must be positive".into()));
            }
        }
        let id = SrqId(self.srqs.len() as u32);
        self.srqs.push(SharedReceiveQueue {
            id,
            node,
            kind,
            cq,
            buffers: VecDeque::new(),
            active: None,
            consumed: Vec::new(),
        });
        Ok(id)
    }

    /// Registers an SRQ under a per-node name; fails if the name is taken.
    pub fn register_named_srq(&mut self, node: NodeId, name: &str, srq: SrqId) -> Result<(), FabricError> {
        let n = &mut self.nodes[node.0 as usize];
        if n.named_srqs.contains_key(name) {
            return Err(FabricError::Argument(format!("{name} already registered on node {}", node.0)));
        }
        n.named_srqs.insert(name.to_string(), srq);
        Ok(())
    }

    pub fn named_srq(&self, node: NodeId, name: &str) -> Option<SrqId> {
        self.nodes[node.0 as usize].named_srqs.get(name).copied()
    }

    pub fn unregister_named_srq(&mut self, node: NodeId, name: &str) {
        self.nodes[node.0 as usize].named_srqs.remove(name);
    }

    pub fn srq(&self, srq: SrqId) -> &SharedReceiveQueue {
        &self.srqs[srq.0 as usize]
    }

    /// Connects two nodes. `a_srq`/`b_srq` name the receive queue where the
    /// peer's SENDs land.
    #[allow(clippy::too_many_arguments)]
    pub fn connect(
        &mut self,
        kind: QpKind,
        a: NodeId,
        a_cq: CqId,
        a_srq: Option<SrqId>,
        b: NodeId,
        b_cq: CqId,
        b_srq: Option<SrqId>,
    ) -> Result<(QpId, QpId), FabricError> {
        for n in [a, b] {
            if n.0 as usize >= self.nodes.len() {
                return Err(FabricError::Unknown("node"));
            }
            if !self.is_alive(n) {
                return Err(FabricError::NodeDown(n));
            }
        }
        let qa = QpId(self.qps.len() as u32);
        let qb = QpId(qa.0 + 1);
        let mtu = self.config.mtu;
        for (id, node, peer, peer_node, cq, srq) in [(qa, a, qb, b, a_cq, a_srq), (qb, b, qa, a, b_cq, b_srq)] {
            self.qps.push(QueuePair {
                id,
                kind,
                node,
                peer,
                peer_node,
                cq,
                srq,
                state: QpState::Ready,
                mtu,
                last_arrival: 0,
                next_msg: 0,
            });
        }
        Ok((qa, qb))
    }

    pub fn qp(&self, qp: QpId) -> &QueuePair {
        &self.qps[qp.0 as usize]
    }

    pub fn post_recv(&mut self, srq: SrqId, base: u64, len: u64) -> Result<(), FabricError> {
        let s = self
            .srqs
            .get_mut(srq.0 as usize)
            .ok_or(FabricError::Unknown("srq"))?;
        match s.kind {
            SrqKind::MultiPacket { stride } => {
                if len == 0 || len % stride as u64 != 0 {
                    return Err(FabricError::Argument(format!(
                        "buffer length {len} is not a multiple of stride {stride}"
                    )));
                }
            }
            SrqKind::SingleBuffer => {
                if len == 0 {
                    return Err(FabricError::Argument("empty receive buffer".into()));
                }
            }
            SrqKind::DramInbox => {
                return Err(FabricError::Argument("DRAM inbox takes no buffers".into()));
            }
        }
        let cap = self.nodes[s.node.0 as usize].pm.capacity();
        if base.checked_add(len).is_none_or(|end| end > cap) {
            return Err(FabricError::Pm(PmError::OutOfBounds {
                addr: base,
                len,
                capacity: cap,
            }));
        }
        s.buffers.push_back((base, len));
        self.rearm = true;
        Ok(())
    }

    fn latency(&mut self) -> Time {
        let j = if self.config.jitter > 0 {
            self.rng.random_range(0..=self.config.jitter)
        } else {
            0
        };
        self.config.base_latency + j
    }

    /// Posts a chain of work requests; they are transmitted in order.
    pub fn post_send(&mut self, qp: QpId, wrs: Vec<WorkRequest>, now: Time) -> Result<(), FabricError> {
        let q = self.qps.get(qp.0 as usize).ok_or(FabricError::Unknown("qp"))?;
        if q.state != QpState::Ready {
            return Err(FabricError::NotEstablished(qp));
        }
        if !self.is_alive(q.node) {
            return Err(FabricError::NodeDown(q.node));
        }
        let kind = q.kind;
        let mtu = q.mtu as usize;
        for wr in &wrs {
            match &wr.verb {
                Verb::Send { payload } => {
                    if payload.is_empty() {
                        return Err(FabricError::Argument("SEND payload must be non-empty".into()));
                    }
                    if kind == QpKind::UnreliableDatagram && payload.len() > mtu {
                        return Err(FabricError::Argument("datagram larger than MTU".into()));
                    }
                }
                _ if kind == QpKind::UnreliableDatagram => {
                    return Err(FabricError::Argument(format!(
                        "{} is not supported on datagram pairs",
                        wr.verb.name()
                    )));
                }
                Verb::Read { len, .. } if *len == 0 => {
                    return Err(FabricError::Argument("READ of zero bytes".into()));
                }
                _ => {}
            }
        }
        for wr in wrs {
            let (dst, msg) = {
                let q = &mut self.qps[qp.0 as usize];
                q.next_msg += 1;
                (q.peer, q.next_msg)
            };
            let bodies: Vec<Body> = match wr.verb {
                Verb::Send { payload } => {
                    self.stats.sends_posted += 1;
                    self.stats.send_bytes_posted += payload.len() as u64;
                    let total = payload.len() as u32;
                    let count = payload.len().div_ceil(mtu) as u32;
                    payload
                        .chunks(mtu)
                        .enumerate()
                        .map(|(i, c)| Body::SendFrag {
                            data: c.to_vec(),
                            index: i as u32,
                            count,
                            total,
                        })
                        .collect()
                }
                Verb::Write {
                    remote_addr,
                    payload,
                } => vec![Body::Write {
                    addr: remote_addr,
                    data: payload,
                }],
                Verb::Read { remote_addr, len } => vec![Body::Read {
                    addr: remote_addr,
                    len,
                }],
                Verb::FetchAdd { remote_addr, add } => vec![Body::FetchAdd {
                    addr: remote_addr,
                    add,
                }],
            };
            for body in bodies {
                let mut arrival = now + self.latency();
                if kind == QpKind::ReliableConnected {
                    let q = &mut self.qps[qp.0 as usize];
                    arrival = arrival.max(q.last_arrival + 1);
                    q.last_arrival = arrival;
                }
                let tiebreak = self.rng.random::<u64>();
                self.seq += 1;
                self.inflight.insert(
                    (arrival, tiebreak, self.seq),
                    Packet {
                        src: qp,
                        dst,
                        msg,
                        work_id: wr.work_id,
                        signaled: wr.signaled,
                        body,
                    },
                );
            }
        }
        Ok(())
    }

    /// Earliest time at which [`Fabric::deliver_step`] has work. Stalled
    /// pairs re-armed by a new receive buffer report time 0 ("now").
    pub fn next_event_time(&self) -> Option<Time> {
        if self.rearm && !self.stalled.is_empty() {
            return Some(0);
        }
        let p = self.inflight.keys().next().map(|k| k.0);
        let a = self.acks.keys().next().map(|k| k.0);
        match (p, a) {
            (Some(p), Some(a)) => Some(p.min(a)),
            (p, a) => p.or(a),
        }
    }

    pub fn inflight_packets(&self) -> usize {
        self.inflight.len() + self.stalled.values().map(|q| q.len()).sum::<usize>()
    }

    /// Source pairs that currently have packets in flight.
    pub fn pending_pairs(&self) -> Vec<QpId> {
        let mut s: BTreeSet<QpId> = self.inflight.values().map(|p| p.src).collect();
        s.extend(self.stalled.iter().filter(|(_, q)| !q.is_empty()).map(|(k, _)| *k));
        s.into_iter().collect()
    }

    /// Delivers everything due at or before `now`, in arrival order.
    pub fn deliver_step(&mut self, now: Time) -> Vec<Completion> {
        let mut out = Vec::new();
        self.retry_stalled(now, &mut out);
        loop {
            let next_pkt = self.inflight.keys().next().copied().filter(|k| k.0 <= now);
            let next_ack = self.acks.keys().next().copied().filter(|k| k.0 <= now);
            match (next_pkt, next_ack) {
                (None, None) => break,
                (Some(pk), Some(ak)) if ak.0 < pk.0 => self.release_ack(ak, &mut out),
                (None, Some(ak)) => self.release_ack(ak, &mut out),
                (Some(pk), _) => {
                    let pkt = self.inflight.remove(&pk).expect("present");
                    self.deliver_packet(pkt, pk.0, &mut out);
                    if self.rearm {
                        self.retry_stalled(pk.0, &mut out);
                    }
                }
            }
        }
        out
    }

    /// Delivers the oldest in-flight packet of `src` regardless of its
    /// arrival time. Lets tests enumerate interleavings explicitly.
    pub fn deliver_from(&mut self, src: QpId, now: Time) -> Option<Vec<Completion>> {
        let mut out = Vec::new();
        if let Some(mut q) = self.stalled.remove(&src) {
            if let Some(pkt) = q.pop_front() {
                self.deliver_packet(pkt, now, &mut out);
                match self.stalled.get_mut(&src) {
                    Some(again) => again.extend(q),
                    None if !q.is_empty() => {
                        self.stalled.insert(src, q);
                    }
                    None => {}
                }
                return Some(out);
            }
        }
        let key = self.inflight.iter().find(|(_, p)| p.src == src).map(|(k, _)| *k)?;
        let pkt = self.inflight.remove(&key).expect("present");
        self.deliver_packet(pkt, now, &mut out);
        Some(out)
    }

    /// Releases every pending sender-side completion immediately.
    pub fn drain_acks(&mut self) -> Vec<Completion> {
        let mut out = Vec::new();
        while let Some(k) = self.acks.keys().next().copied() {
            self.release_ack(k, &mut out);
        }
        out
    }

    fn release_ack(&mut self, key: (Time, u64), out: &mut Vec<Completion>) {
        let c = self.acks.remove(&key).expect("present");
        self.cqs[c.cq.0 as usize].push(c.clone());
        out.push(c);
    }

    fn retry_stalled(&mut self, now: Time, out: &mut Vec<Completion>) {
        if !self.rearm {
            return;
        }
        self.rearm = false;
        let pairs: Vec<QpId> = self.stalled.keys().copied().collect();
        for src in pairs {
            // Detach the queue so deliver_packet does not requeue behind it.
            let Some(mut q) = self.stalled.remove(&src) else { continue };
            while let Some(pkt) = q.pop_front() {
                self.deliver_packet(pkt, now, out);
                if let Some(again) = self.stalled.get_mut(&src) {
                    again.extend(q.drain(..));
                    break;
                }
            }
        }
    }

    fn schedule_ack(&mut self, mut c: Completion, at: Time) {
        if self.config.ack_drop_probability > 0.0
            && self.rng.random::<f64>() < self.config.ack_drop_probability
        {
            self.stats.acks_dropped += 1;
            return;
        }
        c.time = at;
        self.seq += 1;
        self.acks.insert((at, self.seq), c);
    }

    fn push_completion(&mut self, c: Completion, out: &mut Vec<Completion>) {
        self.cqs[c.cq.0 as usize].push(c.clone());
        out.push(c);
    }

    fn deliver_packet(&mut self, pkt: Packet, now: Time, out: &mut Vec<Completion>) {
        let src = &self.qps[pkt.src.0 as usize];
        let (src_cq, src_kind) = (src.cq, src.kind);
        if src_kind == QpKind::ReliableConnected {
            if let Some(q) = self.stalled.get_mut(&pkt.src) {
                if !q.is_empty() {
                    q.push_back(pkt);
                    return;
                }
            }
        }
        let dst = &self.qps[pkt.dst.0 as usize];
        let (dst_node, dst_srq, dst_state) = (dst.node, dst.srq, dst.state);
        if dst_state != QpState::Ready || !self.is_alive(dst_node) {
            return;
        }
        self.stats.packets_delivered += 1;
        let return_latency = self.latency();
        let ack = |op, status, byte_len, data| Completion {
            work_id: pkt.work_id,
            qp: pkt.src,
            cq: src_cq,
            op,
            status,
            byte_len,
            placement: Vec::new(),
            data,
            time: now,
        };
        match &pkt.body {
            Body::Write { addr, data } => {
                let status = match self.nodes[dst_node.0 as usize].pm.write(*addr, data) {
                    Ok(()) => CompletionStatus::Ok,
                    Err(_) => CompletionStatus::RemoteAccess,
                };
                self.record_trace(now, pkt.src, "WRITE", data.len() as u32, *addr);
                if pkt.signaled {
                    let c = ack(CompletionOp::Write, status, data.len() as u32, None);
                    self.stats.round_trips += 1;
                    self.schedule_ack(c, now + return_latency);
                }
            }
            Body::Read { addr, len } => {
                let (status, data) = match self.nodes[dst_node.0 as usize].pm.read(*addr, *len as usize) {
                    Ok(d) => (CompletionStatus::Ok, Some(d)),
                    Err(_) => (CompletionStatus::RemoteAccess, None),
                };
                self.record_trace(now, pkt.src, "READ", *len, *addr);
                let c = ack(CompletionOp::Read, status, *len, data);
                self.stats.round_trips += 1;
                self.schedule_ack(c, now + return_latency);
            }
            Body::FetchAdd { addr, add } => {
                let pm = &mut self.nodes[dst_node.0 as usize].pm;
                let (status, data) = match pm.read_u64(*addr) {
                    Ok(old) => {
                        let _ = pm.write(*addr, &old.wrapping_add(*add).to_le_bytes());
                        (CompletionStatus::Ok, Some(old.to_le_bytes().to_vec()))
                    }
                    Err(_) => (CompletionStatus::RemoteAccess, None),
                };
                self.record_trace(now, pkt.src, "FAA", 8, *addr);
                let c = ack(CompletionOp::FetchAdd, status, 8, data);
                self.stats.round_trips += 1;
                let penalty = self.config.faa_penalty;
                self.schedule_ack(c, now + return_latency + penalty);
            }
            Body::SendFrag {
                data,
                index,
                count,
                total,
            } => {
                let Some(srq_id) = dst_srq else {
                    return;
                };
                let key = (pkt.src, pkt.msg);
                let srq_kind = self.srqs[srq_id.0 as usize].kind;
                let mut stall = false;
                let mut landed: Option<u64> = None;
                match srq_kind {
                    SrqKind::MultiPacket { stride } => {
                        let srq = &mut self.srqs[srq_id.0 as usize];
                        match srq.place_stride(stride as u64, data.len() as u64) {
                            Ok(addr) => landed = Some(addr),
                            Err(PlaceError::NoBuffer) => stall = true,
                            Err(PlaceError::TooLarge) => {
                                self.reassembly.entry(key).or_default().failed = true;
                            }
                        }
                    }
                    SrqKind::SingleBuffer => {
                        let r = self.reassembly.entry(key).or_default();
                        if r.failed {
                            // Rest of a message that already failed.
                        } else if *index == 0 {
                            let srq = &mut self.srqs[srq_id.0 as usize];
                            match srq.buffers.pop_front() {
                                None => stall = true,
                                Some((base, blen)) => {
                                    srq.consumed.push(base);
                                    if *total as u64 > blen {
                                        r.failed = true;
                                    } else {
                                        r.single = Some((base, blen, data.len() as u64));
                                        landed = Some(base);
                                    }
                                }
                            }
                        } else if let Some((base, blen, off)) = r.single {
                            landed = Some(base + off);
                            r.single = Some((base, blen, off + data.len() as u64));
                        }
                    }
                    SrqKind::DramInbox => {
                        self.reassembly.entry(key).or_default().data.extend_from_slice(data);
                    }
                }
                if stall {
                    if src_kind == QpKind::ReliableConnected {
                        self.stalled.entry(pkt.src).or_default().push_front(pkt);
                    }
                    return;
                }
                if let Some(addr) = landed {
                    let _ = self.nodes[dst_node.0 as usize].pm.write(addr, data);
                    self.record_trace(now, pkt.src, "SEND", data.len() as u32, addr);
                    self.reassembly
                        .entry(key)
                        .or_default()
                        .placement
                        .push(Placement {
                            addr,
                            len: data.len() as u32,
                        });
                } else if srq_kind == SrqKind::DramInbox {
                    self.record_trace(now, pkt.src, "SEND", data.len() as u32, 0);
                }
                if index + 1 == *count {
                    let r = self.reassembly.remove(&key).unwrap_or_default();
                    let status = if r.failed {
                        CompletionStatus::RecvBufferTooSmall
                    } else {
                        CompletionStatus::Ok
                    };
                    let srq_cq = self.srqs[srq_id.0 as usize].cq;
                    let inbox = srq_kind == SrqKind::DramInbox;
                    if status == CompletionStatus::Ok {
                        self.stats.sends_completed += 1;
                        self.stats.send_bytes_landed += *total as u64;
                    }
                    if inbox {
                        self.stats.receiver_cpu_items += 1;
                    }
                    let recv = Completion {
                        work_id: 0,
                        qp: pkt.dst,
                        cq: srq_cq,
                        op: CompletionOp::Recv,
                        status,
                        byte_len: *total,
                        placement: if status == CompletionStatus::Ok { r.placement } else { Vec::new() },
                        data: if inbox { Some(r.data) } else { None },
                        time: now,
                    };
                    self.push_completion(recv, out);
                    if pkt.signaled || status != CompletionStatus::Ok {
                        let c = ack(CompletionOp::Send, status, *total, None);
                        self.schedule_ack(c, now + return_latency);
                    }
                    if src_kind == QpKind::ReliableConnected {
                        self.stats.round_trips += pkt.signaled as u64;
                    }
                }
            }
        }
    }

    fn record_trace(&mut self, time: Time, qp: QpId, verb: &str, bytes: u32, dest_addr: u64) {
        if self.config.trace {
            self.trace.push(TraceRow {
                time,
                qp: qp.0,
                verb: verb.to_string(),
                bytes,
                dest_addr,
            });
        }
    }

    /// Removes up to `max` entries (FIFO). Ring queues are never consumed:
    /// the call returns a snapshot of the newest `max` entries.
    pub fn poll_cq(&mut self, cq: CqId, max: usize) -> Vec<Completion> {
        let q = &mut self.cqs[cq.0 as usize];
        q.polls += 1;
        match q.mode {
            CqMode::Fifo { .. } => {
                let n = max.min(q.entries.len());
                q.entries.drain(..n).collect()
            }
            CqMode::Ring { .. } => {
                let skip = q.entries.len().saturating_sub(max);
                q.entries.iter().skip(skip).cloned().collect()
            }
        }
    }

    /// Tears down a pair; its queued packets are discarded and the peer
    /// goes to the error state.
    pub fn destroy_qp(&mut self, qp: QpId) {
        let peer = self.qps[qp.0 as usize].peer;
        self.qps[qp.0 as usize].state = QpState::Destroyed;
        if self.qps[peer.0 as usize].state == QpState::Ready {
            self.qps[peer.0 as usize].state = QpState::Error;
        }
        self.inflight.retain(|_, p| p.src != qp && p.dst != qp);
        self.stalled.remove(&qp);
        self.stalled.remove(&peer);
        self.acks.retain(|_, c| c.qp != qp);
        self.reassembly.retain(|k, _| k.0 != qp && k.0 != peer);
    }

    /// Crashes a node: traffic from it is lost, its pairs are destroyed and
    /// senders still waiting on it see retry-exceeded errors.
    pub fn isolate_node(&mut self, node: NodeId, now: Time) {
        self.nodes[node.0 as usize].alive = false;
        let doomed: Vec<QpId> = self
            .qps
            .iter()
            .filter(|q| q.node == node && q.state != QpState::Destroyed)
            .map(|q| q.id)
            .collect();
        let mut failed_senders: Vec<(QpId, u64)> = Vec::new();
        let on_dead: BTreeSet<QpId> = doomed.iter().copied().collect();
        for p in self.inflight.values().chain(self.stalled.values().flatten()) {
            if on_dead.contains(&p.dst) && !on_dead.contains(&p.src) && p.signaled {
                failed_senders.push((p.src, p.work_id));
            }
        }
        for q in doomed {
            self.destroy_qp(q);
        }
        let delay = self.config.base_latency * 8;
        for (src, work_id) in failed_senders {
            let cq = self.qps[src.0 as usize].cq;
            let c = Completion {
                work_id,
                qp: src,
                cq,
                op: CompletionOp::Send,
                status: CompletionStatus::RetryExceeded,
                byte_len: 0,
                placement: Vec::new(),
                data: None,
                time: now,
            };
            self.seq += 1;
            self.acks.insert((now + delay, self.seq), c);
        }
    }

    /// Restores a crashed node (PM contents preserved) with no pairs.
    pub fn revive_node(&mut self, node: NodeId) {
        let n = &mut self.nodes[node.0 as usize];
        n.alive = true;
        n.named_srqs.clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_nodes(kind: SrqKind) -> (Fabric, QpId, SrqId, CqId, CqId) {
        let mut f = Fabric::new(FabricConfig::default());
        let a = f.add_node(PmConfig::with_capacity(1 << 24));
        let b = f.add_node(PmConfig::with_capacity(1 << 24));
        let cqa = f.create_cq(CqMode::Fifo { capacity: None });
        let cqb = f.create_cq(CqMode::Fifo { capacity: None });
        let srq = f.create_srq(b, kind, cqb).unwrap();
        let (qa, _) = f
            .connect(QpKind::ReliableConnected, a, cqa, None, b, cqb, Some(srq))
            .unwrap();
        (f, qa, srq, cqa, cqb)
    }

    #[test]
    fn post_recv_rules() {
        let (mut f, _, srq, _, _) = two_nodes(SrqKind::MultiPacket { stride: 64 });
        f.post_recv(srq, 0, 4 << 20).unwrap();
        assert_eq!(f.srq(srq).posted(), 1);
        assert!(matches!(f.post_recv(srq, 0, 100), Err(FabricError::Argument(_))));
    }

    #[test]
    fn mp_srq_stride_placement() {
        let (mut f, qa, srq, _, cqb) = two_nodes(SrqKind::MultiPacket { stride: 64 });
        f.post_recv(srq, 0, 4 << 20).unwrap();
        f.post_recv(srq, 4 << 20, 4 << 20).unwrap();
        for len in [32usize, 56, 384] {
            f.post_send(qa, vec![WorkRequest::send(1, vec![0xab; len], false)], 0)
                .unwrap();
        }
        f.deliver_step(1_000_000);
        let recvs = f.poll_cq(cqb, 10);
        let addrs: Vec<u64> = recvs.iter().map(|c| c.placement[0].addr).collect();
        assert_eq!(addrs, vec![0, 64, 128]);
        assert_eq!(f.srq(srq).active.unwrap().next_offset, 128 + 6 * 64);
        assert_eq!(f.srq(srq).consumed, vec![0]);
    }

    #[test]
    fn mp_srq_pops_next_buffer_when_full() {
        let (mut f, qa, srq, _, cqb) = two_nodes(SrqKind::MultiPacket { stride: 64 });
        f.post_recv(srq, 0, 256).unwrap();
        f.post_recv(srq, 4096, 256).unwrap();
        for len in [128usize, 64, 128] {
            f.post_send(qa, vec![WorkRequest::send(1, vec![1; len], false)], 0)
                .unwrap();
        }
        f.deliver_step(u64::MAX / 2);
        let addrs: Vec<u64> = f
            .poll_cq(cqb, 10)
            .iter()
            .map(|c| c.placement[0].addr)
            .collect();
        assert_eq!(addrs, vec![0, 128, 4096]);
        assert_eq!(f.srq(srq).consumed, vec![0, 4096]);
    }

    #[test]
    fn single_buffer_srq_rejects_oversized_send() {
        let (mut f, qa, srq, cqa, cqb) = two_nodes(SrqKind::SingleBuffer);
        for i in 0..3 {
            f.post_recv(srq, i * 64, 64).unwrap();
        }
        f.post_send(qa, vec![WorkRequest::send(1, vec![1; 32], true)], 0).unwrap();
        f.post_send(qa, vec![WorkRequest::send(2, vec![2; 56], true)], 0).unwrap();
        f.post_send(qa, vec![WorkRequest::send(3, vec![3; 384], true)], 0).unwrap();
        f.deliver_step(1_000_000);
        let recvs = f.poll_cq(cqb, 10);
        assert_eq!(recvs[0].placement[0].addr, 0);
        assert_eq!(recvs[1].placement[0].addr, 64);
        assert_eq!(recvs[2].status, CompletionStatus::RecvBufferTooSmall);
        let acks = f.poll_cq(cqa, 10);
        assert_eq!(acks.len(), 3);
        assert_eq!(acks[2].status, CompletionStatus::RecvBufferTooSmall);
        // Both small writes sit in the first XPLine.
        assert_eq!(f.pm(NodeId(1)).read(0, 1).unwrap(), vec![1]);
        assert_eq!(f.pm(NodeId(1)).read(64, 1).unwrap(), vec![2]);
    }

    #[test]
    fn fetch_and_add() {
        let (mut f, qa, _, cqa, _) = two_nodes(SrqKind::DramInbox);
        for id in 0..2 {
            f.post_send(qa, vec![WorkRequest::fetch_add(id, 4096, 1)], 0).unwrap();
        }
        f.deliver_step(1_000_000);
        let olds: Vec<u64> = f
            .poll_cq(cqa, 10)
            .iter()
            .map(|c| u64::from_le_bytes(c.data.clone().unwrap().try_into().unwrap()))
            .collect();
        assert_eq!(olds, vec![0, 1]);
        assert_eq!(f.pm(NodeId(1)).read_u64(4096).unwrap(), 2);
    }

    #[test]
    fn send_then_read_orders_persistence() {
        let (mut f, qa, srq, cqa, _) = two_nodes(SrqKind::MultiPacket { stride: 64 });
        f.post_recv(srq, 0, 1 << 20).unwrap();
        f.post_send(
            qa,
            vec![
                WorkRequest::send(7, vec![9; 64], false),
                WorkRequest::read(7, 0, 1),
            ],
            0,
        )
        .unwrap();
        f.deliver_step(1_000_000);
        let acks = f.poll_cq(cqa, 10);
        assert_eq!(acks.len(), 1);
        assert_eq!(acks[0].op, CompletionOp::Read);
        // The READ observed the SEND's data.
        assert_eq!(acks[0].data.as_deref(), Some(&[9u8][..]));
    }

    #[test]
    fn oversized_send_is_segmented() {
        let (mut f, qa, srq, _, cqb) = two_nodes(SrqKind::MultiPacket { stride: 64 });
        f.post_recv(srq, 0, 1 << 20).unwrap();
        f.post_send(qa, vec![WorkRequest::send(1, vec![5; 2048], false)], 0).unwrap();
        assert_eq!(f.inflight_packets(), 2);
        f.deliver_step(1_000_000);
        let r = f.poll_cq(cqb, 10);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].placement.len(), 2);
        assert_eq!(r[0].byte_len, 2048);
    }

    #[test]
    fn stalls_until_buffers_posted() {
        let (mut f, qa, srq, _, cqb) = two_nodes(SrqKind::MultiPacket { stride: 64 });
        f.post_send(qa, vec![WorkRequest::send(1, vec![5; 64], false)], 0).unwrap();
        assert!(f.deliver_step(1_000_000).is_empty());
        assert_eq!(f.inflight_packets(), 1);
        f.post_recv(srq, 1 << 20, 1 << 20).unwrap();
        assert_eq!(f.next_event_time(), Some(0));
        f.deliver_step(1_000_001);
        assert_eq!(f.poll_cq(cqb, 10)[0].placement[0].addr, 1 << 20);
    }

    #[test]
    fn stalled_packets_resume_in_order() {
        let (mut f, qa, srq, _, cqb) = two_nodes(SrqKind::MultiPacket { stride: 64 });
        for i in 0..3u8 {
            f.post_send(qa, vec![WorkRequest::send(i as u64, vec![i; 64], false)], 0).unwrap();
        }
        assert!(f.deliver_step(1_000_000).is_empty());
        assert_eq!(f.inflight_packets(), 3);
        f.post_recv(srq, 0, 1 << 20).unwrap();
        f.deliver_step(1_000_001);
        let addrs: Vec<u64> = f.poll_cq(cqb, 10).iter().map(|c| c.placement[0].addr).collect();
        assert_eq!(addrs, vec![0, 64, 128]);
        assert_eq!(f.pm(NodeId(1)).read(128, 1).unwrap(), vec![2]);
        assert_eq!(f.inflight_packets(), 0);
    }

    #[test]
    fn cq_modes() {
        let mut f = Fabric::new(FabricConfig::default());
        let cq = f.create_cq(CqMode::Fifo { capacity: None });
        assert!(f.poll_cq(cq, 4).is_empty());
        let ring = f.create_cq(CqMode::Ring { capacity: 4 });
        let bounded = f.create_cq(CqMode::Fifo { capacity: Some(4) });
        let mk = |i: u64, cq| Completion {
            work_id: i,
            qp: QpId(0),
            cq,
            op: CompletionOp::Recv,
            status: CompletionStatus::Ok,
            byte_len: 0,
            placement: vec![],
            data: None,
            time: 0,
        };
        for i in 0..6 {
            f.cqs[ring.0 as usize].push(mk(i, ring));
            f.cqs[bounded.0 as usize].push(mk(i, bounded));
        }
        for i in 0..3 {
            f.cqs[cq.0 as usize].push(mk(i, cq));
        }
        let got: Vec<u64> = f.poll_cq(cq, 2).iter().map(|c| c.work_id).collect();
        assert_eq!(got, vec![0, 1]);
        assert_eq!(f.cq(ring).overwritten, 2);
        assert!(!f.cq(ring).overrun);
        let snap: Vec<u64> = f.poll_cq(ring, 4).iter().map(|c| c.work_id).collect();
        assert_eq!(snap, vec![2, 3, 4, 5]);
        assert_eq!(f.cq(ring).len(), 4);
        assert!(f.cq(bounded).overrun);
    }

    #[test]
    fn destroyed_pair_rejects_posts() {
        let (mut f, qa, _, _, _) = two_nodes(SrqKind::DramInbox);
        f.destroy_qp(qa);
        assert_eq!(
            f.post_send(qa, vec![WorkRequest::send(1, vec![1], true)], 0),
            Err(FabricError::NotEstablished(qa))
        );
    }
}
