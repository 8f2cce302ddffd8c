use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::rc::Rc;

use super::config::{ConfigStore, Configuration, Migration, ServerId};
use super::oracle::{token_of, value_for, Observed, Oracle};
use super::{ClientOp, ClusterConfig, ClusterError, OpKind, OpSource};
use crate::fabric::{
    Completion, CompletionOp, CompletionStatus, CqId, CqMode, Fabric, NodeId, QpId, QpKind, SrqId,
    SrqKind, WorkRequest,
};
use crate::kv::entry::{parse_block, LogEntry, OpType};
use crate::kv::index::{key_hash, shard_of};
use crate::kv::replication::{BatchAction, BatchBuffer, LogRegion};
use crate::kv::segment::SegOwner;
use crate::kv::{KvError, KvServer, Strategy};
use crate::pm::PmCounters;
use crate::rowan::{RowanReceiver, RowanSender};
use crate::{Time, NS_PER_MS};

mod migrate;
mod reconfig;

type Sid = ServerId;

/// Lane key of the shared SHARE log.
const SHARED: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Request {
    client: usize,
    seq: u64,
    attempt: u32,
    kind: OpKind,
    key: Vec<u8>,
    shard: u16,
    token: Option<u64>,
    term: u64,
    floor: Observed,
    issued: Time,
}

#[derive(Debug, Clone)]
enum Resp {
    PutOk(u64),
    GetOk(Observed),
    Reject,
    Failed,
}

#[derive(Debug)]
struct Put {
    req: Request,
    version: u64,
    addr: u64,
    waiting: BTreeSet<Sid>,
}

#[derive(Debug, Clone)]
enum Work {
    Replica { server: Sid, put: u64, backup: Sid },
    Batch { server: Sid, puts: Vec<u64>, backup: Sid },
    CommitVer,
    Stream { server: Sid, shard: u16 },
    Chunk { source: Sid, target: Sid, shard: u16, addr: u64, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tick {
    Control,
    Digest,
    CommitVer,
    Gc,
    Retry,
    Lease,
}

#[derive(Debug)]
enum Ev {
    ClientIssue(usize),
    ClientResp { client: usize, seq: u64, attempt: u32, resp: Resp },
    ClientTimeout { client: usize, seq: u64, attempt: u32 },
    ClientFetch { client: usize, seq: u64 },
    Arrive { server: Sid, req: Request },
    Exec { server: Sid, worker: usize, req: Request },
    Tick { server: Sid, inc: u64, tick: Tick },
    BatchTimeout { server: Sid, inc: u64, worker: usize, backup: Sid, generation: u64 },
    RpcExec { backup: Sid, from: Sid, worker: usize, data: Vec<u8> },
    RpcReply { server: Sid, inc: u64, put: u64, backup: Sid },
    GetForward { source: Sid, req: Request },
    CmTick,
    LoadWindow,
    ConfigArrive { server: Sid, cfg: Rc<Configuration>, block: bool },
    ConfigReply { server: Sid, term: u64 },
    CommitArrive { server: Sid, term: u64 },
    Phase2 { term: u64 },
    MigVersion { target: Sid, shard: u16, version: u64 },
    MigCopy { source: Sid, shard: u16 },
    MigReserve { target: Sid, source: Sid, shard: u16, bytes: Vec<u8> },
    MigWrite { source: Sid, target: Sid, shard: u16, addr: u64, bytes: Vec<u8> },
    MigIngest { target: Sid, source: Sid, shard: u16, addr: u64, len: usize },
    MigChunkDone { source: Sid, shard: u16 },
    MigFinished(Migration),
    Crash(Sid),
}

#[derive(Debug)]
struct Stream {
    term: u64,
    targets: Vec<Sid>,
    pre: BTreeSet<u64>,
    queue: Option<std::collections::VecDeque<u64>>,
    outstanding: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum MigOutState {
    Draining,
    Copying,
    Done,
}

#[derive(Debug)]
struct MigOut {
    target: Sid,
    state: MigOutState,
    queue: std::collections::VecDeque<u64>,
    chunk_inflight: bool,
}

#[derive(Debug, Default)]
struct MigIn {
    source: Sid,
    version: Option<u64>,
    cfg_seen: bool,
    active: bool,
}

struct Server {
    alive: bool,
    inc: u64,
    engine: Option<KvServer>,
    rowan: Option<RowanReceiver>,
    sender: RowanSender,
    cfg: Rc<Configuration>,
    committed_term: u64,
    blocked: Option<u64>,
    phase2: BTreeSet<u16>,
    workers: Vec<Time>,
    next_worker: usize,
    held: Vec<Request>,
    inflight: BTreeMap<u64, Put>,
    cv_sent: BTreeMap<u16, u64>,
    frozen: BTreeSet<u16>,
    streams: BTreeMap<u16, Stream>,
    mig_out: BTreeMap<u16, MigOut>,
    mig_in: BTreeMap<u16, MigIn>,
    batches: HashMap<(usize, Sid), BatchBuffer>,
    send_cq: CqId,
    recv_cq: CqId,
    srq: Option<SrqId>,
}

impl Server {
    fn engine(&mut self) -> &mut KvServer {
        self.engine.as_mut().expect("live server has an engine")
    }
}

#[derive(Debug, Clone, Default)]
struct Client {
    cfg: Option<Rc<Configuration>>,
    current: Option<Request>,
    seq: u64,
    stopped: bool,
}

/// Replica comparison made right after phase 2 of a failover.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplicaCheck {
    pub term: u64,
    pub shard: u16,
    pub replicas: Vec<ServerId>,
    pub entries_compared: usize,
    pub equal: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClusterStats {
    pub issued: u64,
    pub completed: u64,
    pub puts_acked: u64,
    pub gets_ok: u64,
    pub rejects: u64,
    pub timeouts: u64,
    pub failed: u64,
    pub forwarded_gets: u64,
    pub commits_checked: u64,
    pub commit_violations: Vec<String>,
    pub owner_violations: Vec<String>,
    pub replica_checks: Vec<ReplicaCheck>,
    pub out_of_space: bool,
}

pub struct Cluster {
    cfg: ClusterConfig,
    now: Time,
    seq: u64,
    events: BTreeMap<(Time, u64), Ev>,
    fabric: Fabric,
    servers: Vec<Server>,
    clients: Vec<Client>,
    source: Box<dyn OpSource>,
    op_budget: Option<u64>,
    qps: HashMap<(Sid, usize, Sid), QpId>,
    rpc_qps: HashMap<QpId, (Sid, usize)>,
    regions: HashMap<(Sid, usize, Sid), LogRegion>,
    work: HashMap<u64, Work>,
    next_work: u64,
    next_put: u64,
    next_token: u64,
    oracle: Oracle,
    cm: reconfig::Manager,
    stats: ClusterStats,
    latencies: Vec<Time>,
    per_ms: BTreeMap<u64, u64>,
    markers: Vec<(Time, String)>,
    served: BTreeMap<u16, BTreeMap<Sid, u64>>,
    window_shard: BTreeMap<u16, u64>,
    window_server: BTreeMap<Sid, u64>,
}

impl Cluster {
    pub fn new(mut cfg: ClusterConfig, source: Box<dyn OpSource>) -> Result<Self, ClusterError> {
        cfg.sync();
        cfg.validate()?;
        let initial = Configuration::initial(cfg.servers, cfg.shards, cfg.replication);
        let mut fabric = Fabric::new(cfg.fabric);
        let rc = Rc::new(initial.clone());
        let mut servers = Vec::new();
        for id in 0..cfg.servers {
            let node = fabric.add_node(cfg.pm_config());
            debug_assert_eq!(node.0, id);
            servers.push(Server {
                alive: true,
                inc: 0,
                engine: Some(KvServer::new(cfg.server)?),
                rowan: None,
                sender: RowanSender::new(cfg.rowan.retry_timeout),
                cfg: rc.clone(),
                committed_term: initial.term,
                blocked: None,
                phase2: BTreeSet::new(),
                workers: vec![0; cfg.workers],
                next_worker: 0,
                held: Vec::new(),
                inflight: BTreeMap::new(),
                cv_sent: BTreeMap::new(),
                frozen: BTreeSet::new(),
                streams: BTreeMap::new(),
                mig_out: BTreeMap::new(),
                mig_in: BTreeMap::new(),
                batches: HashMap::new(),
                send_cq: CqId(0),
                recv_cq: CqId(0),
                srq: None,
            });
        }
        let mut c = Self {
            cm: reconfig::Manager::new(ConfigStore::new(initial), cfg.servers, cfg.timing.lease),
            cfg,
            now: 0,
            seq: 0,
            events: BTreeMap::new(),
            fabric,
            servers,
            clients: vec![Client::default(); cfg.clients],
            source,
            op_budget: None,
            qps: HashMap::new(),
            rpc_qps: HashMap::new(),
            regions: HashMap::new(),
            work: HashMap::new(),
            next_work: 1,
            next_put: 1,
            next_token: 1,
            oracle: Oracle::new(),
            stats: ClusterStats::default(),
            latencies: Vec::new(),
            per_ms: BTreeMap::new(),
            markers: Vec::new(),
            served: BTreeMap::new(),
            window_shard: BTreeMap::new(),
            window_server: BTreeMap::new(),
        };
        for s in 0..c.cfg.servers {
            c.assign_shards(s);
        }
        c.wire()?;
        for s in 0..c.cfg.servers {
            c.start_ticks(s);
        }
        c.at(c.cfg.timing.cm_period, Ev::CmTick);
        if c.cfg.auto_balance {
            c.at(c.cfg.timing.load_window, Ev::LoadWindow);
        }
        Ok(c)
    }

    // ---- public surface

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn store(&self) -> &ConfigStore {
        &self.cm.store
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn stats(&self) -> &ClusterStats {
        &self.stats
    }

    pub fn markers(&self) -> &[(Time, String)] {
        &self.markers
    }

    /// Client completions per millisecond of simulated time.
    pub fn throughput_timeline(&self) -> &BTreeMap<u64, u64> {
        &self.per_ms
    }

    pub fn latencies(&self) -> &[Time] {
        &self.latencies
    }

    pub fn engine(&self, s: ServerId) -> Option<&KvServer> {
        self.servers[s as usize].engine.as_ref()
    }

    pub fn engine_mut(&mut self, s: ServerId) -> Option<(&mut KvServer, &mut crate::pm::PmDevice)> {
        let e = self.servers[s as usize].engine.as_mut()?;
        Some((e, self.fabric.pm_mut(NodeId(s))))
    }

    pub fn is_alive(&self, s: ServerId) -> bool {
        self.servers[s as usize].alive
    }

    pub fn pm_counters(&self, s: ServerId) -> PmCounters {
        self.fabric.pm(NodeId(s)).counters()
    }

    /// Requests executed per server for `shard`.
    pub fn served(&self, shard: u16) -> BTreeMap<ServerId, u64> {
        self.served.get(&shard).cloned().unwrap_or_default()
    }

    /// Requests executed per server, over all shards.
    pub fn served_by_server(&self) -> BTreeMap<ServerId, u64> {
        let mut out = BTreeMap::new();
        for per in self.served.values() {
            for (&s, &n) in per {
                *out.entry(s).or_default() += n;
            }
        }
        out
    }

    pub fn reset_served(&mut self) {
        self.served.clear();
    }

    /// Zeroes PM counters and latency samples; used after warm-up.
    pub fn reset_measurement(&mut self) {
        for s in 0..self.cfg.servers {
            self.fabric.pm_mut(NodeId(s)).reset_counters();
        }
        self.latencies.clear();
        self.served.clear();
        self.stats.completed = 0;
    }

    pub fn flush_pm(&mut self) {
        for s in 0..self.cfg.servers {
            self.fabric.pm_mut(NodeId(s)).flush_all();
        }
    }

    pub fn set_source(&mut self, source: Box<dyn OpSource>) {
        self.source = source;
    }

    /// Stops issuing once `n` more operations have been issued.
    pub fn limit_ops(&mut self, n: u64) {
        self.op_budget = Some(self.stats.issued + n);
    }

    pub fn start_clients(&mut self) {
        for c in 0..self.clients.len() {
            self.clients[c].stopped = false;
            if self.clients[c].current.is_none() {
                self.at(self.now, Ev::ClientIssue(c));
            }
        }
    }

    pub fn stop_clients(&mut self) {
        for c in &mut self.clients {
            c.stopped = true;
        }
    }

    pub fn outstanding_ops(&self) -> usize {
        self.clients.iter().filter(|c| c.current.is_some()).count()
    }

    pub fn marker(&mut self, label: impl Into<String>) {
        self.markers.push((self.now, label.into()));
    }

    /// Crashes `s` now: volatile state is lost, PM survives.
    pub fn crash(&mut self, s: ServerId) {
        self.at(self.now, Ev::Crash(s));
    }

    pub fn crash_at(&mut self, t: Time, s: ServerId) {
        self.at(t, Ev::Crash(s));
    }

    /// Asks the manager to run these migrations.
    pub fn request_migrations(&mut self, list: Vec<Migration>) {
        self.cm.queue.push_back(reconfig::Kind::Migrate(list));
        self.cm_start_next();
    }

    /// Forced collection of every eligible segment on every live server.
    pub fn force_gc(&mut self) -> Result<usize, ClusterError> {
        let mut n = 0;
        for s in 0..self.cfg.servers {
            if let Some(e) = self.servers[s as usize].engine.as_mut() {
                n += e.gc_step(self.fabric.pm_mut(NodeId(s)), true)?.len();
            }
        }
        Ok(n)
    }

    fn at(&mut self, t: Time, ev: Ev) {
        self.seq += 1;
        self.events.insert((t.max(self.now), self.seq), ev);
    }

    /// Processes one event; false when nothing is left.
    pub fn step(&mut self) -> bool {
        let ev_t = self.events.keys().next().map(|k| k.0);
        let fab_t = self.fabric.next_event_time().map(|t| t.max(self.now));
        match (ev_t, fab_t) {
            (None, None) => return false,
            (e, Some(f)) if e.is_none_or(|e| f <= e) => {
                self.now = f;
                for c in self.fabric.deliver_step(f) {
                    self.on_completion(c);
                }
            }
            _ => {
                let ((t, _), ev) = self.events.pop_first().expect("non-empty");
                self.now = t;
                self.handle(ev);
            }
        }
        if self.cfg.check_single_owner {
            self.check_owners();
        }
        true
    }

    fn next_time(&self) -> Option<Time> {
        let ev_t = self.events.keys().next().map(|k| k.0);
        let fab_t = self.fabric.next_event_time().map(|t| t.max(self.now));
        match (ev_t, fab_t) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn run_until(&mut self, t: Time) {
        while self.next_time().is_some_and(|n| n <= t) {
            self.step();
        }
        self.now = self.now.max(t);
    }

    pub fn run_for(&mut self, d: Time) {
        self.run_until(self.now + d);
    }

    /// Runs until clients are idle or `limit` is reached. Returns whether
    /// every client finished.
    /// Runs until `n` operations have completed since the last measurement
    /// reset. Returns false if `limit` or quiescence came first.
    pub fn run_until_completed(&mut self, n: u64, limit: Time) -> bool {
        while self.stats.completed < n {
            match self.next_time() {
                Some(t) if t <= limit => {
                    self.step();
                }
                _ => return false,
            }
        }
        true
    }

    pub fn run_until_idle(&mut self, limit: Time) -> bool {
        while self.outstanding_ops() > 0 || self.clients.iter().any(|c| !c.stopped) {
            match self.next_time() {
                Some(t) if t <= limit => {
                    self.step();
                }
                _ => return false,
            }
        }
        true
    }

    // ---- setup

    fn assign_shards(&mut self, s: Sid) {
        let cfg = self.servers[s as usize].cfg.clone();
        let eng = self.servers[s as usize].engine();
        for shard in 0..cfg.shards.len() as u16 {
            let p = cfg.placement(shard);
            let source = cfg.migration_of(shard).is_some_and(|m| m.source == s);
            if p.primary == s || source {
                eng.add_shard(shard, crate::kv::Role::Primary);
            } else if p.backups.contains(&s) {
                eng.add_shard(shard, crate::kv::Role::Backup);
            }
        }
    }

    /// Receive queues, queue pairs and baseline regions for live servers.
    fn wire(&mut self) -> Result<(), ClusterError> {
        let n = self.cfg.servers;
        let lanes = self.cfg.workers + 1;
        for s in 0..n {
            if !self.servers[s as usize].alive {
                continue;
            }
            let send_cq = self.fabric.create_cq(CqMode::Ring { capacity: 1024 });
            let srv = &mut self.servers[s as usize];
            srv.send_cq = send_cq;
            match self.cfg.strategy {
                Strategy::Rowan => {
                    let eng = srv.engine.as_mut().expect("live");
                    let r = RowanReceiver::open(&mut self.fabric, NodeId(s), &mut eng.segments, self.cfg.rowan)?;
                    srv.recv_cq = r.cq;
                    srv.srq = Some(r.srq);
                    srv.rowan = Some(r);
                }
                Strategy::Rpc => {
                    let cq = self.fabric.create_cq(CqMode::Ring { capacity: 1024 });
                    srv.recv_cq = cq;
                    srv.srq = Some(self.fabric.create_srq(NodeId(s), SrqKind::DramInbox, cq)?);
                }
                _ => {
                    srv.recv_cq = self.fabric.create_cq(CqMode::Ring { capacity: 1024 });
                    srv.srq = None;
                }
            }
        }
        self.qps.clear();
        self.rpc_qps.clear();
        for s in 0..n {
            for d in 0..n {
                if s == d || !self.servers[s as usize].alive || !self.servers[d as usize].alive {
                    continue;
                }
                for lane in 0..lanes {
                    let (a, b) = (&self.servers[s as usize], &self.servers[d as usize]);
                    let (qa, qb) = self.fabric.connect(
                        QpKind::ReliableConnected,
                        NodeId(s),
                        a.send_cq,
                        None,
                        NodeId(d),
                        b.recv_cq,
                        b.srq,
                    )?;
                    self.qps.insert((s, lane, d), qa);
                    if self.cfg.strategy == Strategy::Rpc {
                        self.rpc_qps.insert(qb, (s, lane));
                    }
                }
            }
        }
        if self.regions.is_empty() {
            self.carve_regions()?;
        }
        Ok(())
    }

    /// Backup-side regions for the baseline strategies, allocated out of
    /// band from each backup's segment pool.
    fn carve_regions(&mut self) -> Result<(), ClusterError> {
        let n = self.cfg.servers;
        let mut keys = Vec::new();
        for d in 0..n {
            match self.cfg.strategy {
                Strategy::Rowan => {}
                Strategy::Rpc => keys.extend((0..self.cfg.workers).map(|w| (d, w, d))),
                Strategy::Write | Strategy::Batch => {
                    for s in (0..n).filter(|&s| s != d) {
                        keys.extend((0..self.cfg.workers).map(|w| (s, w, d)));
                    }
                }
                Strategy::Share => keys.extend((0..n).filter(|&s| s != d).map(|s| (s, SHARED, d))),
            }
        }
        for key in keys {
            let d = key.2;
            let eng = self.servers[d as usize].engine.as_mut().expect("live");
            let seg = eng.segments.segment_size();
            let want = self.cfg.baseline_region.max(seg).div_ceil(seg);
            let pm = self.fabric.pm_mut(NodeId(d));
            let mut base = None;
            let mut len = 0;
            for i in 0..want {
                let id = eng
                    .segments
                    .allocate(pm, SegOwner::Control, (i & 0xffff) as u16)
                    .ok_or(KvError::OutOfSpace)?;
                let b = eng.segments.base(id);
                // Regions must be contiguous; stop at the first gap.
                if base.is_some_and(|b0: u64| b0 + len != b) {
                    break;
                }
                base.get_or_insert(b);
                len += seg;
            }
            self.regions.insert(key, LogRegion::new(base.expect("allocated"), len));
        }
        Ok(())
    }

    fn start_ticks(&mut self, s: Sid) {
        let t = self.cfg.timing;
        let inc = self.servers[s as usize].inc;
        // Stagger servers so their periodic work does not coincide.
        let off = s as Time * 7_919;
        let mut ticks = vec![(Tick::Lease, t.lease_renew)];
        if self.cfg.gc {
            ticks.push((Tick::Gc, t.gc_period));
        }
        if self.cfg.strategy == Strategy::Rowan {
            ticks.push((Tick::Retry, t.retry_period));
            if self.cfg.background {
                ticks.push((Tick::Control, t.control_period));
                ticks.push((Tick::Digest, t.digest_period));
                ticks.push((Tick::CommitVer, t.commitver_period));
            }
        }
        for (tick, period) in ticks {
            self.at(self.now + period + off, Ev::Tick { server: s, inc, tick });
        }
    }

    fn period(&self, tick: Tick) -> Time {
        let t = &self.cfg.timing;
        match tick {
            Tick::Control => t.control_period,
            Tick::Digest => t.digest_period,
            Tick::CommitVer => t.commitver_period,
            Tick::Gc => t.gc_period,
            Tick::Retry => t.retry_period,
            Tick::Lease => t.lease_renew,
        }
    }

    // ---- event dispatch

    fn handle(&mut self, ev: Ev) {
        match ev {
            Ev::ClientIssue(c) => self.client_issue(c),
            Ev::ClientResp { client, seq, attempt, resp } => self.client_resp(client, seq, attempt, resp),
            Ev::ClientTimeout { client, seq, attempt } => {
                if self.clients[client]
                    .current
                    .as_ref()
                    .is_some_and(|r| r.seq == seq && r.attempt == attempt)
                {
                    self.stats.timeouts += 1;
                    self.at(self.now + self.cfg.timing.client_backoff, Ev::ClientFetch { client, seq });
                }
            }
            Ev::ClientFetch { client, seq } => self.client_fetch(client, seq),
            Ev::Arrive { server, req } => self.admit(server, req),
            Ev::Exec { server, worker, req } => self.exec(server, worker, req),
            Ev::Tick { server, inc, tick } => self.tick(server, inc, tick),
            Ev::BatchTimeout { server, inc, worker, backup, generation } => {
                let srv = &mut self.servers[server as usize];
                if !srv.alive || srv.inc != inc {
                    return;
                }
                if let Some(b) = srv
                    .batches
                    .get_mut(&(worker, backup))
                    .and_then(|b| b.expire(generation))
                {
                    self.flush_batch(server, worker, backup, b.puts, b.bytes);
                }
            }
            Ev::RpcExec { backup, from, worker, data } => self.rpc_exec(backup, from, worker, data),
            Ev::RpcReply { server, inc, put, backup } => {
                if self.servers[server as usize].alive && self.servers[server as usize].inc == inc {
                    self.replica_acked(server, put, backup);
                }
            }
            Ev::GetForward { source, req } => self.get_forwarded(source, req),
            Ev::CmTick => self.cm_tick(),
            Ev::LoadWindow => self.load_window(),
            Ev::ConfigArrive { server, cfg, block } => self.config_arrive(server, cfg, block),
            Ev::ConfigReply { server, term } => self.config_reply(server, term),
            Ev::CommitArrive { server, term } => self.commit_arrive(server, term),
            Ev::Phase2 { term } => self.phase2(term),
            Ev::MigVersion { target, shard, version } => self.mig_version(target, shard, version),
            Ev::MigCopy { source, shard } => self.mig_copy(source, shard),
            Ev::MigReserve { target, source, shard, bytes } => self.mig_reserve(target, source, shard, bytes),
            Ev::MigWrite { source, target, shard, addr, bytes } => self.mig_write(source, target, shard, addr, bytes),
            Ev::MigIngest { target, source, shard, addr, len } => self.mig_ingest(target, source, shard, addr, len),
            Ev::MigChunkDone { source, shard } => self.mig_chunk_done(source, shard),
            Ev::MigFinished(m) => {
                self.cm.queue.push_back(reconfig::Kind::MigrationDone(m));
                self.cm_start_next();
            }
            Ev::Crash(s) => self.do_crash(s),
        }
    }

    // ---- clients

    fn client_issue(&mut self, c: usize) {
        let cl = &self.clients[c];
        if cl.current.is_some() || cl.stopped {
            return;
        }
        if self.op_budget.is_some_and(|b| self.stats.issued >= b) {
            self.clients[c].stopped = true;
            return;
        }
        let Some(ClientOp { kind, key }) = self.source.next_op(c, self.now) else {
            self.clients[c].stopped = true;
            return;
        };
        self.stats.issued += 1;
        let token = match kind {
            OpKind::Put { .. } => {
                let t = self.next_token;
                self.next_token += 1;
                self.oracle.issue(t, &key);
                Some(t)
            }
            _ => None,
        };
        let cl = &mut self.clients[c];
        cl.seq += 1;
        if cl.cfg.is_none() {
            cl.cfg = Some(Rc::new(self.cm.store.latest().clone()));
        }
        let req = Request {
            client: c,
            seq: cl.seq,
            attempt: 0,
            shard: shard_of(key_hash(&key), self.cfg.shards),
            floor: self.oracle.floor(&key),
            kind,
            key,
            token,
            term: 0,
            issued: self.now,
        };
        cl.current = Some(req);
        self.client_send(c);
    }

    fn client_send(&mut self, c: usize) {
        let cl = &mut self.clients[c];
        let cfg = cl.cfg.clone().expect("fetched");
        let req = cl.current.as_mut().expect("in flight");
        req.term = cfg.term;
        let req = req.clone();
        let server = cfg.placement(req.shard).primary;
        let t = self.cfg.timing;
        self.at(
            self.now + t.client_timeout,
            Ev::ClientTimeout {
                client: c,
                seq: req.seq,
                attempt: req.attempt,
            },
        );
        self.at(self.now + t.client_latency, Ev::Arrive { server, req });
    }

    fn client_fetch(&mut self, c: usize, seq: u64) {
        let latest = Rc::new(self.cm.store.latest().clone());
        let cl = &mut self.clients[c];
        let Some(req) = cl.current.as_mut().filter(|r| r.seq == seq) else {
            return;
        };
        req.attempt += 1;
        cl.cfg = Some(latest);
        self.client_send(c);
    }

    fn client_resp(&mut self, c: usize, seq: u64, attempt: u32, resp: Resp) {
        let Some(req) = self.clients[c]
            .current
            .as_ref()
            .filter(|r| r.seq == seq && r.attempt == attempt)
            .cloned()
        else {
            return;
        };
        match resp {
            Resp::Reject => {
                self.stats.rejects += 1;
                self.at(self.now + self.cfg.timing.client_backoff, Ev::ClientFetch { client: c, seq });
                return;
            }
            Resp::PutOk(version) => {
                self.oracle.ack(&req.key, version, req.token);
                self.stats.puts_acked += 1;
            }
            Resp::GetOk(obs) => {
                self.oracle.check(&req.key, req.floor, obs);
                self.stats.gets_ok += 1;
            }
            Resp::Failed => self.stats.failed += 1,
        }
        self.stats.completed += 1;
        self.latencies.push(self.now - req.issued);
        *self.per_ms.entry(self.now / NS_PER_MS).or_default() += 1;
        self.clients[c].current = None;
        self.at(self.now, Ev::ClientIssue(c));
    }

    fn respond(&mut self, req: &Request, resp: Resp) {
        self.at(
            self.now + self.cfg.timing.client_latency,
            Ev::ClientResp {
                client: req.client,
                seq: req.seq,
                attempt: req.attempt,
                resp,
            },
        );
    }

    // ---- request admission

    /// Whether `s` executes requests for `shard` right now.
    fn serves(&self, s: Sid, shard: u16) -> Admission {
        let srv = &self.servers[s as usize];
        if !srv.alive {
            return Admission::Drop;
        }
        let p = srv.cfg.placement(shard);
        if p.primary != s {
            return Admission::Reject;
        }
        if let Some(m) = srv.cfg.migration_of(shard) {
            if m.target == s && !srv.mig_in.get(&shard).is_some_and(|m| m.active) {
                return Admission::Hold;
            }
        }
        if srv.blocked.is_some() || srv.phase2.contains(&shard) {
            return Admission::Hold;
        }
        Admission::Serve
    }

    fn admission(&self, s: Sid, req: &Request) -> Admission {
        let srv = &self.servers[s as usize];
        if !srv.alive {
            return Admission::Drop;
        }
        if req.term > srv.cfg.term || srv.blocked.is_some() {
            return Admission::Hold;
        }
        if req.term < srv.cfg.term {
            return Admission::Reject;
        }
        self.serves(s, req.shard)
    }

    fn admit(&mut self, s: Sid, req: Request) {
        match self.admission(s, &req) {
            Admission::Drop => {}
            Admission::Hold => self.servers[s as usize].held.push(req),
            Admission::Reject => self.respond(&req, Resp::Reject),
            Admission::Serve => {
                let cost = match req.kind {
                    OpKind::Get => self.cfg.timing.get_cpu,
                    _ => self.cfg.timing.put_cpu,
                };
                let srv = &mut self.servers[s as usize];
                let w = srv.next_worker;
                srv.next_worker = (w + 1) % srv.workers.len();
                let t = srv.workers[w].max(self.now) + cost;
                srv.workers[w] = t;
                self.at(t, Ev::Exec { server: s, worker: w, req });
            }
        }
    }

    fn rerun_held(&mut self, s: Sid) {
        let held = std::mem::take(&mut self.servers[s as usize].held);
        for req in held {
            self.admit(s, req);
        }
    }

    fn exec(&mut self, s: Sid, worker: usize, req: Request) {
        match self.admission(s, &req) {
            Admission::Serve => {}
            Admission::Drop => return,
            Admission::Hold => {
                self.servers[s as usize].held.push(req);
                return;
            }
            Admission::Reject => {
                self.respond(&req, Resp::Reject);
                return;
            }
        }
        *self.served.entry(req.shard).or_default().entry(s).or_default() += 1;
        *self.window_shard.entry(req.shard).or_default() += 1;
        *self.window_server.entry(s).or_default() += 1;
        match req.kind {
            OpKind::Get => self.do_get(s, req),
            _ => self.do_put(s, worker, req),
        }
    }

    fn observe(e: &KvServer, pm: &crate::pm::PmDevice, key: &[u8]) -> Option<Observed> {
        e.lookup(pm, key).ok().flatten().map(|d| Observed {
            version: d.entry.version,
            token: match d.entry.op {
                OpType::Put => token_of(&d.entry.value),
                _ => None,
            },
        })
    }

    fn do_get(&mut self, s: Sid, req: Request) {
        let srv = &self.servers[s as usize];
        let eng = srv.engine.as_ref().expect("live");
        match Self::observe(eng, self.fabric.pm(NodeId(s)), &req.key) {
            Some(o) => self.respond(&req, Resp::GetOk(o)),
            None => match srv.mig_in.get(&req.shard) {
                Some(m) => {
                    self.stats.forwarded_gets += 1;
                    let source = m.source;
                    self.at(self.now + self.cfg.timing.client_latency, Ev::GetForward { source, req });
                }
                None => self.respond(&req, Resp::GetOk(Observed::ABSENT)),
            },
        }
    }

    fn get_forwarded(&mut self, source: Sid, req: Request) {
        let srv = &self.servers[source as usize];
        let resp = match srv.engine.as_ref() {
            Some(e) if srv.alive && e.shards.contains_key(&req.shard) => {
                Resp::GetOk(Self::observe(e, self.fabric.pm(NodeId(source)), &req.key).unwrap_or(Observed::ABSENT))
            }
            _ => Resp::Reject,
        };
        self.respond(&req, resp);
    }

    fn do_put(&mut self, s: Sid, worker: usize, req: Request) {
        let mtu = self.cfg.fabric.mtu as usize;
        let limits = self.cfg.server.limits();
        let srv = &mut self.servers[s as usize];
        let backups = srv.cfg.placement(req.shard).backups.clone();
        let eng = srv.engine.as_mut().expect("live");
        let pm = self.fabric.pm_mut(NodeId(s));
        let version = match eng.next_version(req.shard) {
            Ok(v) => v,
            Err(_) => {
                self.respond(&req, Resp::Reject);
                return;
            }
        };
        let entry = match req.kind {
            OpKind::Put { value_len } => LogEntry::put(
                req.shard,
                version,
                &req.key,
                &value_for(req.token.expect("puts carry tokens"), value_len),
            ),
            _ => LogEntry::del(req.shard, version, &req.key),
        };
        let blocks = match entry.encode(mtu, &limits) {
            Ok(b) => b,
            Err(_) => {
                self.respond(&req, Resp::Failed);
                return;
            }
        };
        let addr = match eng.append_tlog(pm, worker, &blocks) {
            Ok(a) => a,
            Err(_) => {
                self.stats.out_of_space = true;
                self.respond(&req, Resp::Failed);
                return;
            }
        };
        let bytes = blocks.concat();
        let id = self.next_put;
        self.next_put += 1;
        srv.inflight.insert(
            id,
            Put {
                req,
                version,
                addr,
                waiting: backups.iter().copied().collect(),
            },
        );
        if backups.is_empty() {
            self.finish_put(s, id);
            return;
        }
        for b in backups {
            self.replicate(s, worker, id, b, &bytes);
        }
    }

    fn new_work(&mut self, w: Work) -> u64 {
        let id = self.next_work;
        self.next_work += 1;
        self.work.insert(id, w);
        id
    }

    fn replicate(&mut self, s: Sid, worker: usize, put: u64, b: Sid, bytes: &[u8]) {
        let Some(&qp) = self.qps.get(&(s, worker, b)) else {
            return;
        };
        let now = self.now;
        match self.cfg.strategy {
            Strategy::Rowan => {
                let wid = self.new_work(Work::Replica { server: s, put, backup: b });
                let srv = &mut self.servers[s as usize];
                if srv.sender.write(&mut self.fabric, qp, bytes.to_vec(), wid, now).is_err() {
                    self.work.remove(&wid);
                }
            }
            Strategy::Write | Strategy::Share => {
                let lane = if self.cfg.strategy == Strategy::Share { SHARED } else { worker };
                let addr = self
                    .regions
                    .get_mut(&(s, lane, b))
                    .expect("region")
                    .reserve(bytes.len() as u64);
                let wid = self.new_work(Work::Replica { server: s, put, backup: b });
                self.post_write_read(qp, wid, addr, bytes.to_vec());
            }
            Strategy::Batch => {
                let inc = self.servers[s as usize].inc;
                let action = self.servers[s as usize]
                    .batches
                    .entry((worker, b))
                    .or_default()
                    .push(put, bytes, now);
                match action {
                    BatchAction::Flush(batch) => self.flush_batch(s, worker, b, batch.puts, batch.bytes),
                    BatchAction::Arm { deadline, generation } => self.at(
                        deadline,
                        Ev::BatchTimeout {
                            server: s,
                            inc,
                            worker,
                            backup: b,
                            generation,
                        },
                    ),
                    BatchAction::Wait => {}
                }
            }
            Strategy::Rpc => {
                let mut msg = put.to_le_bytes().to_vec();
                msg.extend_from_slice(bytes);
                let _ = self.fabric.post_send(qp, vec![WorkRequest::send(0, msg, false)], now);
            }
        }
    }

    fn post_write_read(&mut self, qp: QpId, wid: u64, addr: u64, bytes: Vec<u8>) {
        let r = self.fabric.post_send(
            qp,
            vec![WorkRequest::write(wid, addr, bytes, false), WorkRequest::read(wid, addr, 1)],
            self.now,
        );
        if r.is_err() {
            self.work.remove(&wid);
        }
    }

    fn flush_batch(&mut self, s: Sid, worker: usize, b: Sid, puts: Vec<u64>, bytes: Vec<u8>) {
        let Some(&qp) = self.qps.get(&(s, worker, b)) else {
            return;
        };
        let addr = self
            .regions
            .get_mut(&(s, worker, b))
            .expect("region")
            .reserve(bytes.len() as u64);
        let wid = self.new_work(Work::Batch { server: s, puts, backup: b });
        self.post_write_read(qp, wid, addr, bytes);
    }

    fn rpc_exec(&mut self, backup: Sid, from: Sid, worker: usize, data: Vec<u8>) {
        let srv = &self.servers[backup as usize];
        if !srv.alive || data.len() < 8 {
            return;
        }
        let put = u64::from_le_bytes(data[..8].try_into().expect("8 bytes"));
        let entry = &data[8..];
        let addr = self
            .regions
            .get_mut(&(backup, worker, backup))
            .expect("region")
            .reserve(entry.len() as u64);
        let _ = self.fabric.pm_mut(NodeId(backup)).write(addr, entry);
        let inc = self.servers[from as usize].inc;
        self.at(
            self.now + self.fabric.config().base_latency,
            Ev::RpcReply {
                server: from,
                inc,
                put,
                backup,
            },
        );
    }

    fn replica_acked(&mut self, s: Sid, put: u64, b: Sid) {
        let Some(p) = self.servers[s as usize].inflight.get_mut(&put) else {
            return;
        };
        p.waiting.remove(&b);
        if p.waiting.is_empty() {
            self.finish_put(s, put);
        }
    }

    fn finish_put(&mut self, s: Sid, put: u64) {
        let srv = &mut self.servers[s as usize];
        let Some(p) = srv.inflight.remove(&put) else {
            return;
        };
        let eng = srv.engine.as_mut().expect("live");
        let pm = self.fabric.pm_mut(NodeId(s));
        let _ = eng.install(pm, p.req.shard, &p.req.key, p.version, p.addr);
        let _ = eng.tlog_done(pm, p.addr);
        self.respond(&p.req, Resp::PutOk(p.version));
        let shard = p.req.shard;
        if self.servers[s as usize].streams.contains_key(&shard) {
            self.try_streams(s);
        }
        if self.servers[s as usize].mig_out.contains_key(&shard) {
            self.mig_try_drain(s, shard);
        }
    }

    // ---- fabric completions

    fn on_completion(&mut self, c: Completion) {
        if c.op == CompletionOp::Recv {
            if let Some(&(src, lane)) = self.rpc_qps.get(&c.qp) {
                if c.status == CompletionStatus::Ok {
                    let dst = self.fabric.qp(c.qp).node.0;
                    let srv = &mut self.servers[dst as usize];
                    if !srv.alive {
                        return;
                    }
                    let w = lane % srv.workers.len();
                    let t = srv.workers[w].max(self.now) + self.cfg.timing.rpc_cpu;
                    srv.workers[w] = t;
                    self.at(
                        t,
                        Ev::RpcExec {
                            backup: dst,
                            from: src,
                            worker: w,
                            data: c.data.unwrap_or_default(),
                        },
                    );
                }
            }
            return;
        }
        let s = self.fabric.qp(c.qp).node.0;
        let Some(work) = self.work.get(&c.work_id) else {
            return;
        };
        if !self.servers[s as usize].alive {
            return;
        }
        let via_rowan = match work {
            Work::CommitVer | Work::Stream { .. } => true,
            Work::Replica { .. } => self.cfg.strategy == Strategy::Rowan,
            _ => false,
        };
        let ok = if via_rowan {
            match self.servers[s as usize].sender.on_completion(&c) {
                Some(a) => a.persisted,
                None => return,
            }
        } else {
            match (c.op, c.status) {
                (CompletionOp::Read, CompletionStatus::Ok) => true,
                (_, CompletionStatus::Ok) => return,
                _ => false,
            }
        };
        let work = self.work.remove(&c.work_id).expect("present");
        if !ok {
            if let Work::Stream { server, shard } = work {
                self.stream_acked(server, shard);
            }
            return;
        }
        match work {
            Work::Replica { server, put, backup } => self.replica_acked(server, put, backup),
            Work::Batch { server, puts, backup } => {
                for p in puts {
                    self.replica_acked(server, p, backup);
                }
            }
            Work::CommitVer => {}
            Work::Stream { server, shard } => self.stream_acked(server, shard),
            Work::Chunk { source, target, shard, addr, len } => {
                self.at(
                    self.now + self.cfg.timing.cm_latency,
                    Ev::MigIngest {
                        target,
                        source,
                        shard,
                        addr,
                        len,
                    },
                );
            }
        }
    }

    // ---- periodic work

    fn tick(&mut self, s: Sid, inc: u64, tick: Tick) {
        let srv = &self.servers[s as usize];
        if !srv.alive || srv.inc != inc {
            return;
        }
        match tick {
            Tick::Lease => self.cm.renew(s, self.now),
            Tick::Control => {
                let srv = &mut self.servers[s as usize];
                if let (Some(r), Some(e)) = (srv.rowan.as_mut(), srv.engine.as_mut()) {
                    if let Ok(used) = r.control_step(&mut self.fabric, &mut e.segments, self.now) {
                        e.hand_over(used);
                    }
                }
            }
            Tick::Digest => self.digest_tick(s),
            Tick::CommitVer => self.commitver_tick(s),
            Tick::Gc => {
                let srv = &mut self.servers[s as usize];
                if let Some(e) = srv.engine.as_mut() {
                    if e.gc_step(self.fabric.pm_mut(NodeId(s)), false).is_err() {
                        self.stats.out_of_space = true;
                    }
                }
            }
            Tick::Retry => {
                let failed = self.servers[s as usize].sender.retry_due(&mut self.fabric, self.now);
                for id in failed {
                    self.work.remove(&id);
                }
            }
        }
        let p = self.period(tick);
        self.at(self.now + p, Ev::Tick { server: s, inc, tick });
    }

    fn digest_tick(&mut self, s: Sid) {
        let mtu = self.cfg.fabric.mtu as usize;
        let srv = &mut self.servers[s as usize];
        let Some(e) = srv.engine.as_mut() else { return };
        let pm = self.fabric.pm_mut(NodeId(s));
        let Ok(records) = e.digest_step(pm) else { return };
        // Independent check of every Used -> Committed transition: walk the
        // raw blocks and compare against the CommitVer array.
        for r in records {
            self.stats.commits_checked += 1;
            let base = e.segments.base(r.segment);
            let bytes = pm.read(base, e.segments.segment_size() as usize).unwrap_or_default();
            let mut pos = 0;
            while pos < bytes.len() {
                let Some((h, len)) = parse_block(&bytes[pos..], mtu) else { break };
                if h.op != OpType::CommitVer && e.shards.contains_key(&h.shard) {
                    let cv = e.digest.commit_ver(h.shard);
                    if h.version > cv {
                        self.stats.commit_violations.push(format!(
                            "server {s} segment {}: shard {} version {} above CommitVer {cv}",
                            r.segment, h.shard, h.version
                        ));
                    }
                }
                pos += len;
            }
        }
    }

    fn commitver_tick(&mut self, s: Sid) {
        let mtu = self.cfg.fabric.mtu as usize;
        let limits = self.cfg.server.limits();
        let srv = &mut self.servers[s as usize];
        let cfg = srv.cfg.clone();
        let mut min_inflight: BTreeMap<u16, u64> = BTreeMap::new();
        for p in srv.inflight.values() {
            let e = min_inflight.entry(p.req.shard).or_insert(u64::MAX);
            *e = (*e).min(p.version);
        }
        let mut sends = Vec::new();
        for shard in cfg.primaries_of(s) {
            if srv.frozen.contains(&shard) || srv.phase2.contains(&shard) {
                continue;
            }
            if cfg.migration_of(shard).is_some_and(|m| m.target == s)
                && !srv.mig_in.get(&shard).is_some_and(|m| m.active)
            {
                continue;
            }
            let eng = srv.engine.as_mut().expect("live");
            let Some(st) = eng.shards.get_mut(&shard) else { continue };
            let cv = min_inflight
                .get(&shard)
                .map_or(st.shard_version, |v| v.saturating_sub(1));
            if cv <= srv.cv_sent.get(&shard).copied().unwrap_or(0) {
                continue;
            }
            st.commit_ver = cv;
            eng.digest.raise_commit_ver(shard, cv);
            srv.cv_sent.insert(shard, cv);
            let bytes = LogEntry::commit_ver(shard, cv)
                .encode(mtu, &limits)
                .expect("commit entries always encode")
                .concat();
            for &b in &cfg.placement(shard).backups {
                sends.push((b, bytes.clone()));
            }
        }
        let lane = self.cfg.workers;
        for (b, bytes) in sends {
            let Some(&qp) = self.qps.get(&(s, lane, b)) else { continue };
            let wid = self.new_work(Work::CommitVer);
            if self.servers[s as usize]
                .sender
                .write(&mut self.fabric, qp, bytes, wid, self.now)
                .is_err()
            {
                self.work.remove(&wid);
            }
        }
    }

    // ---- checks

    fn check_owners(&mut self) {
        for shard in 0..self.cfg.shards {
            let owners: Vec<Sid> = (0..self.cfg.servers)
                .filter(|&s| self.serves(s, shard) == Admission::Serve)
                .collect();
            if owners.len() > 1 && self.stats.owner_violations.len() < 100 {
                self.stats.owner_violations.push(format!(
                    "t={} shard {shard} served by {owners:?}",
                    self.now
                ));
            }
        }
    }

    /// Reads `key` at the server currently responsible for it.
    pub fn read_direct(&self, key: &[u8]) -> Option<Observed> {
        let cfg = self.cm.store.committed();
        let shard = shard_of(key_hash(key), self.cfg.shards);
        let p = cfg.placement(shard).primary;
        let e = self.servers[p as usize].engine.as_ref()?;
        if !self.servers[p as usize].alive {
            return None;
        }
        let got = Self::observe(e, self.fabric.pm(NodeId(p)), key);
        match got {
            Some(o) => Some(o),
            None => match cfg.migration_of(shard) {
                Some(m) => self.servers[m.source as usize]
                    .engine
                    .as_ref()
                    .and_then(|e| Self::observe(e, self.fabric.pm(NodeId(m.source)), key))
                    .or(Some(Observed::ABSENT)),
                None => Some(Observed::ABSENT),
            },
        }
    }

    /// Checks every acknowledged key against the current primaries.
    /// Returns the violations found by this pass.
    pub fn verify_acked(&mut self) -> Vec<String> {
        let keys: Vec<(Vec<u8>, Observed)> = self
            .oracle
            .acked_keys()
            .map(|(k, o)| (k.clone(), *o))
            .collect();
        let before = self.oracle.violations().len();
        for (k, floor) in keys {
            match self.read_direct(&k) {
                Some(got) => {
                    self.oracle.check(&k, floor, got);
                }
                None => {
                    self.oracle.check(&k, floor, Observed::ABSENT);
                }
            }
        }
        self.oracle.violations()[before..].to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Admission {
    Serve,
    Hold,
    Reject,
    Drop,
}
