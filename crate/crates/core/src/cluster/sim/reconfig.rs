use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use super::super::config::{BalanceRule, ConfigStore, Configuration, Lease, Migration, ServerId};
use super::{Cluster, ClusterError, ReplicaCheck, Sid, Stream, Work};
use crate::fabric::NodeId;
use crate::kv::entry::{DecodedEntry, LogEntry, OpType};
use crate::kv::segment::{SegOwner, SegState};
use crate::kv::{KvServer, Role};
use crate::rowan::RowanSender;
use crate::Time;

#[derive(Debug, Clone, PartialEq, Eq)]
pub(super) enum Kind {
    Failover(BTreeSet<ServerId>),
    RestoreBackups,
    Migrate(Vec<Migration>),
    MigrationDone(Migration),
}

#[derive(Debug)]
pub(super) struct Active {
    term: u64,
    kind: Kind,
    waiting: BTreeSet<Sid>,
    committed: bool,
}

#[derive(Debug)]
pub(super) struct Manager {
    pub store: ConfigStore,
    leases: BTreeMap<Sid, Lease>,
    pub dead: BTreeSet<Sid>,
    active: Option<Active>,
    pub queue: VecDeque<Kind>,
    /// No failure detection while the whole cluster is down.
    suspended: bool,
}

impl Manager {
    pub fn new(store: ConfigStore, servers: u32, lease: Time) -> Self {
        Self {
            store,
            leases: (0..servers).map(|s| (s, Lease::new(s, 0, lease))).collect(),
            dead: BTreeSet::new(),
            active: None,
            queue: VecDeque::new(),
            suspended: false,
        }
    }

    pub fn renew(&mut self, s: Sid, now: Time) {
        if let Some(l) = self.leases.get_mut(&s) {
            l.renew(now);
        }
    }

    pub fn busy(&self) -> bool {
        self.active.is_some() || !self.queue.is_empty()
    }
}

/// Entry identity used when comparing replicas.
type EntryId = (u64, Vec<u8>, u32);

fn id_of(d: &DecodedEntry) -> EntryId {
    (d.entry.version, d.entry.key.clone(), d.checksum)
}

impl Cluster {
    /// True while a configuration change is queued or in progress.
    pub fn reconfiguring(&self) -> bool {
        self.cm.busy()
    }

    pub(super) fn cm_tick(&mut self) {
        let now = self.now;
        if !self.cm.suspended {
            let members = self.cm.store.committed().membership.clone();
            let newly: BTreeSet<Sid> = members
                .iter()
                .copied()
                .filter(|s| !self.cm.dead.contains(s) && self.cm.leases[s].expired(now))
                .collect();
            if !newly.is_empty() {
                self.markers.push((now, format!("lease expired: {newly:?}")));
                self.cm.dead.extend(newly.iter().copied());
                self.cm.queue.push_front(Kind::Failover(self.cm.dead.clone()));
                let mut commit = None;
                if let Some(a) = self.cm.active.as_mut() {
                    for s in &newly {
                        a.waiting.remove(s);
                    }
                    if a.waiting.is_empty() && !a.committed {
                        commit = Some(a.term);
                    }
                }
                if let Some(t) = commit {
                    self.cm_commit(t);
                }
            }
        }
        self.cm_start_next();
        self.at(now + self.cfg.timing.cm_period, super::Ev::CmTick);
    }

    fn build(&self, kind: &Kind) -> Option<Configuration> {
        let cur = self.cm.store.committed();
        match kind {
            Kind::Failover(dead) => {
                let mut base = cur.clone();
                // Undo migrations that lost a participant: the shard falls
                // back to its backups.
                for m in cur.migrations.iter() {
                    if dead.contains(&m.source) || dead.contains(&m.target) {
                        let dead_one = if dead.contains(&m.source) { m.source } else { m.target };
                        base.shards[m.shard as usize].primary = dead_one;
                    }
                }
                if !cur.membership.iter().any(|s| dead.contains(s)) {
                    return None;
                }
                Some(base.without(dead).0)
            }
            Kind::RestoreBackups => {
                let (next, added) = cur.with_backups_restored(self.cfg.replication);
                (!added.is_empty()).then_some(next)
            }
            Kind::Migrate(list) => {
                let mut next = cur.clone();
                next.term += 1;
                for m in list {
                    let p = next.placement(m.shard).clone();
                    let ok = p.primary == m.source
                        && !p.holds(m.target)
                        && next.membership.contains(&m.target)
                        && !self.cm.dead.contains(&m.target)
                        && next.migration_of(m.shard).is_none();
                    if ok {
                        next.shards[m.shard as usize].primary = m.target;
                        next.migrations.push(*m);
                    }
                }
                (next.migrations.len() > cur.migrations.len()).then_some(next)
            }
            Kind::MigrationDone(m) => {
                let mut next = cur.clone();
                let before = next.migrations.len();
                next.migrations.retain(|x| x != m);
                next.term += 1;
                (next.migrations.len() < before).then_some(next)
            }
        }
    }

    pub(super) fn cm_start_next(&mut self) {
        if self.cm.active.is_some() || self.cm.suspended {
            return;
        }
        while let Some(kind) = self.cm.queue.pop_front() {
            let Some(next) = self.build(&kind) else { continue };
            debug_assert!(next.validate(self.cfg.replication).is_ok() || matches!(kind, Kind::Failover(_)));
            if self.cm.store.write(next.clone()).is_err() {
                continue;
            }
            let old = self.cm.store.committed().membership.clone();
            let waiting: BTreeSet<Sid> = old
                .union(&next.membership)
                .copied()
                .filter(|s| !self.cm.dead.contains(s))
                .collect();
            let block = matches!(kind, Kind::Failover(_));
            self.markers.push((self.now, format!("config {} written ({})", next.term, kind_name(&kind))));
            let rc = Rc::new(next);
            let t = self.now + self.cfg.timing.store_write + self.cfg.timing.cm_latency;
            for &s in &waiting {
                self.at(
                    t,
                    super::Ev::ConfigArrive {
                        server: s,
                        cfg: rc.clone(),
                        block,
                    },
                );
            }
            let term = rc.term;
            self.cm.active = Some(Active {
                term,
                kind,
                waiting,
                committed: false,
            });
            return;
        }
    }

    pub(super) fn config_arrive(&mut self, s: Sid, cfg: Rc<Configuration>, block: bool) {
        if !self.servers[s as usize].alive {
            return;
        }
        if cfg.term > self.servers[s as usize].cfg.term {
            self.apply_config(s, cfg.clone(), block);
        }
        self.at(
            self.now + self.cfg.timing.cm_latency,
            super::Ev::ConfigReply { server: s, term: cfg.term },
        );
    }

    pub(super) fn config_reply(&mut self, s: Sid, term: u64) {
        let Some(a) = self.cm.active.as_mut() else { return };
        if a.term != term || a.committed {
            return;
        }
        a.waiting.remove(&s);
        if a.waiting.is_empty() {
            self.cm_commit(term);
        }
    }

    fn cm_commit(&mut self, term: u64) {
        if self.cm.store.commit(term).is_err() {
            return;
        }
        self.markers.push((self.now, format!("config {term} committed")));
        let a = self.cm.active.as_mut().expect("active");
        a.committed = true;
        let failover = matches!(a.kind, Kind::Failover(_));
        let members: Vec<Sid> = (0..self.cfg.servers).filter(|s| !self.cm.dead.contains(s)).collect();
        for s in members {
            self.at(self.now + self.cfg.timing.cm_latency, super::Ev::CommitArrive { server: s, term });
        }
        if failover {
            self.at(
                self.now + self.cfg.timing.cm_latency + self.cfg.timing.phase2_delay,
                super::Ev::Phase2 { term },
            );
        } else {
            self.cm.active = None;
            self.cm_start_next();
        }
    }

    pub(super) fn commit_arrive(&mut self, s: Sid, term: u64) {
        let srv = &mut self.servers[s as usize];
        if !srv.alive {
            return;
        }
        srv.committed_term = srv.committed_term.max(term);
        if srv.blocked.is_some_and(|b| b <= term) {
            srv.blocked = None;
        }
        self.try_streams(s);
        self.rerun_held(s);
    }

    pub(super) fn phase2(&mut self, term: u64) {
        let mut shards = BTreeSet::new();
        for srv in &self.servers {
            if srv.alive {
                shards.extend(srv.phase2.iter().copied());
            }
        }
        let checks = self.reconcile(&shards, true);
        for c in checks {
            self.stats.replica_checks.push(ReplicaCheck { term, ..c });
        }
        for s in 0..self.cfg.servers {
            if self.servers[s as usize].alive {
                self.servers[s as usize].phase2.clear();
                self.rerun_held(s);
            }
        }
        self.markers.push((self.now, format!("config {term} phase 2 done")));
        if self.cm.active.as_ref().is_some_and(|a| a.term == term) {
            self.cm.active = None;
        }
        if self.cm.store.committed().under_replicated(self.cfg.replication) {
            self.cm.queue.push_back(Kind::RestoreBackups);
        }
        self.cm_start_next();
    }

    /// Makes every live replica of `shards` hold the union of the entries
    /// any of them holds above its CommitVer, then indexes everything and
    /// raises shard versions. With `check`, replicas are rescanned and
    /// compared afterwards.
    pub(super) fn reconcile(&mut self, shards: &BTreeSet<u16>, check: bool) -> Vec<ReplicaCheck> {
        if shards.is_empty() {
            return Vec::new();
        }
        let cfg = self.cm.store.committed().clone();
        let reps_of: BTreeMap<u16, Vec<Sid>> = shards
            .iter()
            .map(|&sh| {
                let reps = cfg
                    .placement(sh)
                    .replicas()
                    .filter(|&r| self.servers[r as usize].alive)
                    .collect();
                (sh, reps)
            })
            .collect();
        let involved: BTreeSet<Sid> = reps_of.values().flatten().copied().collect();
        let mut have: BTreeMap<Sid, BTreeMap<u16, Vec<DecodedEntry>>> = BTreeMap::new();
        let mut cv0: BTreeMap<(Sid, u16), u64> = BTreeMap::new();
        for &r in &involved {
            let pm = self.fabric.pm(NodeId(r));
            let eng = self.servers[r as usize].engine.as_ref().expect("live");
            let mut by_shard: BTreeMap<u16, Vec<DecodedEntry>> = BTreeMap::new();
            for d in eng.collect_entries(pm, |_, _, _| true) {
                if d.entry.op != OpType::CommitVer && shards.contains(&d.entry.shard) {
                    by_shard.entry(d.entry.shard).or_default().push(d);
                }
            }
            for &sh in shards {
                let st_cv = eng.shards.get(&sh).map_or(0, |s| s.commit_ver);
                cv0.insert((r, sh), eng.digest.commit_ver(sh).max(st_cv));
            }
            have.insert(r, by_shard);
        }
        let mut checks = Vec::new();
        for &sh in shards {
            let reps = reps_of[&sh].clone();
            let mut union: BTreeMap<EntryId, LogEntry> = BTreeMap::new();
            for r in &reps {
                for d in have[r].get(&sh).into_iter().flatten() {
                    union.entry(id_of(d)).or_insert_with(|| d.entry.clone());
                }
            }
            let mut max_v = union.keys().map(|k| k.0).max().unwrap_or(0);
            let max_cv = reps.iter().map(|r| cv0[&(*r, sh)]).max().unwrap_or(0);
            max_v = max_v.max(max_cv);
            for &r in &reps {
                let cv = cv0[&(r, sh)];
                let own: BTreeSet<EntryId> = have[&r].get(&sh).into_iter().flatten().map(id_of).collect();
                let missing: Vec<LogEntry> = union
                    .iter()
                    .filter(|(k, _)| k.0 > cv && !own.contains(*k))
                    .map(|(_, e)| e.clone())
                    .collect();
                let srv = &mut self.servers[r as usize];
                let eng = srv.engine.as_mut().expect("live");
                let pm = self.fabric.pm_mut(NodeId(r));
                for d in have[&r].get(&sh).into_iter().flatten() {
                    eng.index_decoded(pm, d);
                }
                if eng.store_entries(pm, &missing).is_err() {
                    self.stats.out_of_space = true;
                }
                if let Some(st) = eng.shards.get_mut(&sh) {
                    st.shard_version = st.shard_version.max(max_v);
                    st.commit_ver = st.commit_ver.max(max_v);
                }
                eng.digest.raise_commit_ver(sh, max_v);
                srv.cv_sent.insert(sh, max_v);
            }
            if check {
                checks.push(self.compare_replicas(sh, &reps, max_cv, &union));
            }
        }
        checks
    }

    fn compare_replicas(
        &self,
        shard: u16,
        reps: &[Sid],
        above: u64,
        union: &BTreeMap<EntryId, LogEntry>,
    ) -> ReplicaCheck {
        let mut sets = Vec::new();
        let mut indexes = Vec::new();
        let keys: BTreeSet<&Vec<u8>> = union.keys().map(|k| &k.1).collect();
        for &r in reps {
            let pm = self.fabric.pm(NodeId(r));
            let eng = self.servers[r as usize].engine.as_ref().expect("live");
            let set: BTreeSet<EntryId> = eng
                .collect_entries(pm, |_, _, _| true)
                .iter()
                .filter(|d| d.entry.shard == shard && d.entry.op != OpType::CommitVer && d.entry.version > above)
                .map(id_of)
                .collect();
            sets.push(set);
            let idx: Vec<Option<u64>> = keys.iter().map(|k| eng.indexed_version(pm, k)).collect();
            indexes.push(idx);
        }
        let equal = sets.windows(2).all(|w| w[0] == w[1]) && indexes.windows(2).all(|w| w[0] == w[1]);
        ReplicaCheck {
            term: 0,
            shard,
            replicas: reps.to_vec(),
            entries_compared: sets.first().map_or(0, |s| s.len()),
            equal,
        }
    }

    /// Installs a newer configuration on server `s`.
    pub(super) fn apply_config(&mut self, s: Sid, cfg: Rc<Configuration>, block: bool) {
        let old = std::mem::replace(&mut self.servers[s as usize].cfg, cfg.clone());
        let departed: Vec<Sid> = old.membership.difference(&cfg.membership).copied().collect();
        for d in departed {
            self.disconnect(s, d);
        }
        let srv = &mut self.servers[s as usize];
        if block {
            srv.blocked = Some(cfg.term);
        }
        let ids: Vec<u64> = srv.inflight.keys().copied().collect();
        let mut finished = Vec::new();
        for id in ids {
            let p = srv.inflight.get_mut(&id).expect("present");
            p.waiting.retain(|b| cfg.membership.contains(b));
            if p.waiting.is_empty() {
                finished.push(id);
            }
        }
        for shard in 0..cfg.shards.len() as u16 {
            let p = cfg.placement(shard);
            let mig = cfg.migration_of(shard);
            let source = mig.is_some_and(|m| m.source == s);
            let target = mig.is_some_and(|m| m.target == s);
            let holds = p.holds(s) || source;
            let srv = &mut self.servers[s as usize];
            let eng = srv.engine.as_mut().expect("live");
            let held = eng.shards.get(&shard).map(|st| st.role);
            if !holds {
                if held.is_some() {
                    eng.drop_shard(shard);
                    srv.mig_out.remove(&shard);
                    srv.mig_in.remove(&shard);
                    srv.streams.remove(&shard);
                    srv.frozen.remove(&shard);
                    srv.cv_sent.remove(&shard);
                }
                continue;
            }
            let role = if p.primary == s || source { Role::Primary } else { Role::Backup };
            if held == Some(Role::Backup) && role == Role::Primary && !target {
                srv.phase2.insert(shard);
            }
            eng.add_shard(shard, role);
            if target && !srv.mig_in.contains_key(&shard) {
                srv.mig_in.insert(
                    shard,
                    super::MigIn {
                        source: mig.expect("migration").source,
                        cfg_seen: true,
                        ..Default::default()
                    },
                );
            }
            if !target && mig.is_none() {
                srv.mig_in.remove(&shard);
            }
            if source && !srv.mig_out.contains_key(&shard) {
                srv.mig_out.insert(
                    shard,
                    super::MigOut {
                        target: mig.expect("migration").target,
                        state: super::MigOutState::Draining,
                        queue: VecDeque::new(),
                        chunk_inflight: false,
                    },
                );
            }
            // Newly added backups of a shard this server leads get its data
            // streamed over.
            if p.primary == s && old.placement(shard).primary == s {
                let added: Vec<Sid> = p
                    .backups
                    .iter()
                    .copied()
                    .filter(|b| !old.placement(shard).backups.contains(b))
                    .collect();
                if !added.is_empty() {
                    let pre: BTreeSet<u64> = srv
                        .inflight
                        .iter()
                        .filter(|(_, x)| x.req.shard == shard)
                        .map(|(&id, _)| id)
                        .collect();
                    srv.frozen.insert(shard);
                    srv.streams
                        .entry(shard)
                        .and_modify(|st| st.targets.extend(added.iter().copied()))
                        .or_insert(Stream {
                            term: cfg.term,
                            targets: added,
                            pre,
                            queue: None,
                            outstanding: 0,
                        });
                }
            }
        }
        for id in finished {
            self.finish_put(s, id);
        }
        let drains: Vec<u16> = self.servers[s as usize].mig_out.keys().copied().collect();
        for shard in drains {
            self.mig_try_drain(s, shard);
        }
        self.try_streams(s);
        self.rerun_held(s);
    }

    /// Tears down `s`'s pairs towards `d`.
    fn disconnect(&mut self, s: Sid, d: Sid) {
        let lanes = self.cfg.workers + 1;
        for lane in 0..lanes {
            if let Some(qp) = self.qps.remove(&(s, lane, d)) {
                for id in self.servers[s as usize].sender.abandon(qp) {
                    self.work.remove(&id);
                }
                self.fabric.destroy_qp(qp);
            }
        }
        self.servers[s as usize].batches.retain(|k, _| k.1 != d);
    }

    // ---- backup restore streams

    pub(super) fn try_streams(&mut self, s: Sid) {
        let shards: Vec<u16> = self.servers[s as usize].streams.keys().copied().collect();
        for shard in shards {
            self.pump_stream(s, shard);
        }
    }

    fn pump_stream(&mut self, s: Sid, shard: u16) {
        let window = self.cfg.timing.stream_window;
        let lane = self.cfg.workers;
        let srv = &mut self.servers[s as usize];
        if !srv.alive {
            return;
        }
        let committed = srv.committed_term;
        let inflight: BTreeSet<u64> = srv.inflight.keys().copied().collect();
        let Some(st) = srv.streams.get_mut(&shard) else { return };
        if st.queue.is_none() {
            if committed < st.term || st.pre.iter().any(|id| inflight.contains(id)) {
                return;
            }
            let eng = srv.engine.as_ref().expect("live");
            let mut addrs = eng.shards.get(&shard).map(|x| x.index.addrs()).unwrap_or_default();
            addrs.sort_unstable();
            st.queue = Some(addrs.into());
        }
        let mut sends = Vec::new();
        let targets = st.targets.clone();
        while st.outstanding < window {
            let Some(addr) = st.queue.as_mut().expect("set").pop_front() else { break };
            let eng = srv.engine.as_ref().expect("live");
            let pm = self.fabric.pm(NodeId(s));
            let Some(d) = eng.read_entry(pm, addr) else { continue };
            let mut bytes = Vec::with_capacity(d.encoded_len());
            for &(a, l) in &d.blocks {
                bytes.extend(pm.read(a, l).unwrap_or_default());
            }
            for &t in &targets {
                st.outstanding += 1;
                sends.push((t, bytes.clone()));
            }
        }
        let done = st.outstanding == 0 && st.queue.as_ref().is_some_and(|q| q.is_empty());
        if done {
            srv.streams.remove(&shard);
            srv.frozen.remove(&shard);
            self.markers.push((self.now, format!("server {s} restored backups of shard {shard}")));
            return;
        }
        for (t, bytes) in sends {
            let wid = self.new_work(Work::Stream { server: s, shard });
            let ok = match self.qps.get(&(s, lane, t)) {
                Some(&qp) => self.servers[s as usize]
                    .sender
                    .write(&mut self.fabric, qp, bytes, wid, self.now)
                    .is_ok(),
                None => false,
            };
            if !ok {
                self.work.remove(&wid);
                if let Some(st) = self.servers[s as usize].streams.get_mut(&shard) {
                    st.outstanding -= 1;
                }
            }
        }
    }

    pub(super) fn stream_acked(&mut self, s: Sid, shard: u16) {
        if let Some(st) = self.servers[s as usize].streams.get_mut(&shard) {
            st.outstanding = st.outstanding.saturating_sub(1);
            self.pump_stream(s, shard);
        }
    }

    // ---- failures and restart

    pub(super) fn do_crash(&mut self, s: Sid) {
        let srv = &mut self.servers[s as usize];
        if !srv.alive {
            return;
        }
        srv.alive = false;
        srv.inc += 1;
        srv.engine = None;
        srv.rowan = None;
        srv.sender = RowanSender::new(self.cfg.rowan.retry_timeout);
        srv.held.clear();
        srv.inflight.clear();
        srv.cv_sent.clear();
        srv.frozen.clear();
        srv.streams.clear();
        srv.mig_out.clear();
        srv.mig_in.clear();
        srv.batches.clear();
        srv.blocked = None;
        srv.phase2.clear();
        self.fabric.isolate_node(NodeId(s), self.now);
        self.fabric.pm_mut(NodeId(s)).crash();
        self.qps.retain(|k, _| k.0 != s && k.2 != s);
        self.markers.push((self.now, format!("server {s} crashed")));
    }

    /// Crashes every server at once; failure detection is suspended until
    /// [`Cluster::cold_start`].
    pub fn crash_all(&mut self) {
        self.cm.suspended = true;
        for s in 0..self.cfg.servers {
            self.do_crash(s);
        }
    }

    /// Restarts every server from its PM contents and the last committed
    /// configuration.
    pub fn cold_start(&mut self) -> Result<(), ClusterError> {
        for s in 0..self.cfg.servers {
            if self.servers[s as usize].alive {
                self.do_crash(s);
            }
        }
        self.cm.store.abandon_pending();
        self.cm.active = None;
        self.cm.queue.clear();
        self.cm.dead.clear();
        let cfg = Rc::new(self.cm.store.committed().clone());
        for s in 0..self.cfg.servers {
            self.fabric.revive_node(NodeId(s));
            let eng = KvServer::recover(self.cfg.server, self.fabric.pm(NodeId(s)))?;
            let srv = &mut self.servers[s as usize];
            srv.alive = cfg.membership.contains(&s);
            srv.inc += 1;
            srv.engine = Some(eng);
            srv.cfg = cfg.clone();
            srv.committed_term = cfg.term;
            srv.workers = vec![0; self.cfg.workers];
            if !srv.alive {
                continue;
            }
            self.assign_shards(s);
            let srv = &mut self.servers[s as usize];
            let eng = srv.engine.as_mut().expect("recovered");
            let pm = self.fabric.pm_mut(NodeId(s));
            eng.rebuild_indexes(pm);
            // Logs of the previous run are closed: t-log and clean segments
            // were written by this server, b-log segments go to the digest.
            let mut digest = Vec::new();
            for id in eng.segments.ids_where(|m| m.state == SegState::Using || m.state == SegState::Used) {
                let m = eng.segments.meta(id);
                match (m.owner, m.state) {
                    (SegOwner::Control, SegState::Using) => {
                        eng.segments.transition(pm, id, SegState::Used).map_err(crate::kv::KvError::from)?;
                        digest.push(id);
                    }
                    (SegOwner::Control, _) => digest.push(id),
                    _ => {
                        eng.segments.transition(pm, id, SegState::Committed).map_err(crate::kv::KvError::from)?;
                    }
                }
            }
            eng.hand_over(digest);
        }
        let all: BTreeSet<u16> = (0..self.cfg.shards).collect();
        self.reconcile(&all, false);
        self.regions.clear();
        self.wire()?;
        for s in 0..self.cfg.servers {
            if self.servers[s as usize].alive {
                self.cm.renew(s, self.now);
                self.start_ticks(s);
                let shards: Vec<u16> = self.servers[s as usize].mig_out.keys().copied().collect();
                for sh in shards {
                    self.mig_try_drain(s, sh);
                }
            }
        }
        // Resume migrations the committed configuration still lists.
        for m in cfg.migrations.clone() {
            self.resume_migration(m);
        }
        self.cm.suspended = false;
        self.markers.push((self.now, "cold start complete".into()));
        for c in 0..self.clients.len() {
            if let Some(r) = &self.clients[c].current {
                let seq = r.seq;
                self.at(self.now, super::Ev::ClientFetch { client: c, seq });
            }
        }
        Ok(())
    }

    // ---- load balancing

    pub(super) fn load_window(&mut self) {
        let cfg = self.cm.store.committed().clone();
        let server_load: BTreeMap<Sid, f64> = std::mem::take(&mut self.window_server)
            .into_iter()
            .map(|(s, n)| (s, n as f64))
            .collect();
        let shard_load: BTreeMap<u16, f64> = std::mem::take(&mut self.window_shard)
            .into_iter()
            .map(|(s, n)| (s, n as f64))
            .collect();
        if !self.cm.busy() && cfg.migrations.is_empty() {
            let plan = BalanceRule::default().plan(&cfg, &server_load, &shard_load);
            if !plan.is_empty() {
                self.markers.push((self.now, format!("rebalance: {} migrations", plan.len())));
                self.request_migrations(plan);
            }
        }
        self.at(self.now + self.cfg.timing.load_window, super::Ev::LoadWindow);
    }
}

fn kind_name(k: &Kind) -> &'static str {
    match k {
        Kind::Failover(_) => "failover",
        Kind::RestoreBackups => "restore backups",
        Kind::Migrate(_) => "migrate",
        Kind::MigrationDone(_) => "migration done",
    }
}
