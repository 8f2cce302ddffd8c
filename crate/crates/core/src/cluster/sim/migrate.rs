//! Shard migration: the source drains, hands its version over, then copies
//! the shard's live entries into the target's clean log chunk by chunk.

use std::collections::VecDeque;

use super::super::config::Migration;
use super::{Cluster, Ev, MigIn, MigOut, MigOutState, Sid, Work};
use crate::fabric::NodeId;

impl Cluster {
    pub(super) fn mig_try_drain(&mut self, s: Sid, shard: u16) {
        let lat = self.cfg.timing.cm_latency;
        let srv = &mut self.servers[s as usize];
        if !srv.alive {
            return;
        }
        let busy = srv.inflight.values().any(|p| p.req.shard == shard);
        let Some(m) = srv.mig_out.get_mut(&shard) else { return };
        if m.state != MigOutState::Draining || busy {
            return;
        }
        let eng = srv.engine.as_ref().expect("live");
        let Some(st) = eng.shards.get(&shard) else { return };
        let version = st.shard_version;
        let mut addrs = st.index.addrs();
        addrs.sort_unstable();
        m.state = MigOutState::Copying;
        m.queue = addrs.into();
        let target = m.target;
        self.markers.push((self.now, format!("shard {shard}: {s} -> {target} copy started")));
        self.at(self.now + lat, Ev::MigVersion { target, shard, version });
        self.at(self.now, Ev::MigCopy { source: s, shard });
    }

    pub(super) fn mig_version(&mut self, target: Sid, shard: u16, version: u64) {
        let srv = &mut self.servers[target as usize];
        if !srv.alive {
            return;
        }
        let Some(m) = srv.mig_in.get_mut(&shard) else { return };
        m.version = Some(version);
        if m.cfg_seen && !m.active {
            m.active = true;
            let eng = srv.engine.as_mut().expect("live");
            if let Some(st) = eng.shards.get_mut(&shard) {
                st.shard_version = st.shard_version.max(version);
            }
            self.markers.push((self.now, format!("shard {shard}: target {target} serving")));
            self.rerun_held(target);
        }
    }

    pub(super) fn mig_copy(&mut self, source: Sid, shard: u16) {
        let chunk = self.cfg.timing.chunk_bytes;
        let lat = self.cfg.timing.cm_latency;
        let srv = &mut self.servers[source as usize];
        if !srv.alive {
            return;
        }
        let Some(m) = srv.mig_out.get_mut(&shard) else { return };
        if m.state != MigOutState::Copying || m.chunk_inflight {
            return;
        }
        let eng = srv.engine.as_ref().expect("live");
        let pm = self.fabric.pm(NodeId(source));
        let mut bytes = Vec::new();
        while bytes.len() < chunk {
            let Some(addr) = m.queue.pop_front() else { break };
            let Some(d) = eng.read_entry(pm, addr) else { continue };
            for &(a, l) in &d.blocks {
                bytes.extend(pm.read(a, l).unwrap_or_default());
            }
        }
        let target = m.target;
        if bytes.is_empty() {
            m.state = MigOutState::Done;
            self.at(
                self.now + lat,
                Ev::MigFinished(Migration {
                    source,
                    target,
                    shard,
                }),
            );
            return;
        }
        m.chunk_inflight = true;
        self.at(
            self.now + lat,
            Ev::MigReserve {
                target,
                source,
                shard,
                bytes,
            },
        );
    }

    pub(super) fn mig_reserve(&mut self, target: Sid, source: Sid, shard: u16, bytes: Vec<u8>) {
        let srv = &mut self.servers[target as usize];
        if !srv.alive || !srv.mig_in.contains_key(&shard) {
            return;
        }
        let eng = srv.engine.as_mut().expect("live");
        let Ok(addr) = eng.reserve_clean(self.fabric.pm_mut(NodeId(target)), bytes.len()) else {
            self.stats.out_of_space = true;
            return;
        };
        self.at(
            self.now + self.cfg.timing.cm_latency,
            Ev::MigWrite {
                source,
                target,
                shard,
                addr,
                bytes,
            },
        );
    }

    pub(super) fn mig_write(&mut self, source: Sid, target: Sid, shard: u16, addr: u64, bytes: Vec<u8>) {
        if !self.servers[source as usize].alive {
            return;
        }
        let Some(&qp) = self.qps.get(&(source, self.cfg.workers, target)) else { return };
        let len = bytes.len();
        let wid = self.new_work(Work::Chunk {
            source,
            target,
            shard,
            addr,
            len,
        });
        self.post_write_read(qp, wid, addr, bytes);
    }

    pub(super) fn mig_ingest(&mut self, target: Sid, source: Sid, shard: u16, addr: u64, len: usize) {
        let srv = &mut self.servers[target as usize];
        if !srv.alive || !srv.mig_in.contains_key(&shard) {
            return;
        }
        let eng = srv.engine.as_mut().expect("live");
        eng.ingest(self.fabric.pm(NodeId(target)), addr, len);
        self.at(self.now + self.cfg.timing.cm_latency, Ev::MigChunkDone { source, shard });
    }

    pub(super) fn mig_chunk_done(&mut self, source: Sid, shard: u16) {
        if let Some(m) = self.servers[source as usize].mig_out.get_mut(&shard) {
            m.chunk_inflight = false;
        }
        self.mig_copy(source, shard);
    }

    /// Restarts an interrupted migration from the beginning after a restart.
    pub(super) fn resume_migration(&mut self, m: Migration) {
        let (s, t) = (m.source, m.target);
        if !self.servers[s as usize].alive || !self.servers[t as usize].alive {
            return;
        }
        self.servers[s as usize].mig_out.insert(
            m.shard,
            MigOut {
                target: t,
                state: MigOutState::Draining,
                queue: VecDeque::new(),
                chunk_inflight: false,
            },
        );
        self.servers[t as usize].mig_in.insert(
            m.shard,
            MigIn {
                source: s,
                cfg_seen: true,
                ..Default::default()
            },
        );
        self.mig_try_drain(s, m.shard);
    }
}
