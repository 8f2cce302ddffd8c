//! Cluster configuration, its durable store, leases and the load-balancing
//! rule of the configuration manager.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::Time;

pub type ServerId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("term {new} does not exceed committed term {old}")]
    StaleTerm { old: u64, new: u64 },
    #[error("shard {shard}: {reason}")]
    Placement { shard: u16, reason: String },
    #[error("no pending configuration with term {0}")]
    NoPending(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub primary: ServerId,
    pub backups: Vec<ServerId>,
}

impl Placement {
    pub fn replicas(&self) -> impl Iterator<Item = ServerId> + '_ {
        std::iter::once(self.primary).chain(self.backups.iter().copied())
    }

    pub fn holds(&self, s: ServerId) -> bool {
        self.primary == s || self.backups.contains(&s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Migration {
    pub source: ServerId,
    pub target: ServerId,
    pub shard: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub term: u64,
    pub membership: BTreeSet<ServerId>,
    pub shards: Vec<Placement>,
    pub migrations: Vec<Migration>,
}

impl Configuration {
    /// Round-robin placement: shard `i` has primary `i mod m` and backups
    /// on the next `k-1` servers.
    pub fn initial(servers: u32, shards: u16, k: usize) -> Self {
        let k = k.clamp(1, servers as usize);
        Self {
            term: 1,
            membership: (0..servers).collect(),
            shards: (0..shards as u32)
                .map(|i| Placement {
                    primary: i % servers,
                    backups: (1..k as u32).map(|j| (i + j) % servers).collect(),
                })
                .collect(),
            migrations: Vec::new(),
        }
    }

    pub fn placement(&self, shard: u16) -> &Placement {
        &self.shards[shard as usize]
    }

    pub fn migration_of(&self, shard: u16) -> Option<Migration> {
        self.migrations.iter().copied().find(|m| m.shard == shard)
    }

    pub fn primaries_of(&self, s: ServerId) -> impl Iterator<Item = u16> + '_ {
        self.shards
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.primary == s)
            .map(|(i, _)| i as u16)
    }

    pub fn shards_held_by(&self, s: ServerId) -> impl Iterator<Item = u16> + '_ {
        self.shards
            .iter()
            .enumerate()
            .filter(move |(_, p)| p.holds(s))
            .map(|(i, _)| i as u16)
    }

    /// Every shard has one primary and `k-1` distinct backups, all members.
    pub fn validate(&self, k: usize) -> Result<(), ConfigError> {
        for (i, p) in self.shards.iter().enumerate() {
            let shard = i as u16;
            let reps: BTreeSet<_> = p.replicas().collect();
            if reps.len() != p.backups.len() + 1 {
                return Err(ConfigError::Placement {
                    shard,
                    reason: "duplicate replica".into(),
                });
            }
            if let Some(r) = reps.iter().find(|r| !self.membership.contains(r)) {
                return Err(ConfigError::Placement {
                    shard,
                    reason: format!("replica {r} is not a member"),
                });
            }
            let want = k.min(self.membership.len());
            if reps.len() != want {
                return Err(ConfigError::Placement {
                    shard,
                    reason: format!("{} replicas, expected {want}", reps.len()),
                });
            }
        }
        Ok(())
    }

    /// Failover: drops `dead`, promotes the first surviving backup of each
    /// orphaned shard. Returns the promoted `(shard, new primary)` pairs.
    pub fn without(&self, dead: &BTreeSet<ServerId>) -> (Self, Vec<(u16, ServerId)>) {
        let mut next = self.clone();
        next.term += 1;
        next.membership.retain(|s| !dead.contains(s));
        let mut promoted = Vec::new();
        for (i, p) in next.shards.iter_mut().enumerate() {
            p.backups.retain(|b| !dead.contains(b));
            if dead.contains(&p.primary) && !p.backups.is_empty() {
                p.primary = p.backups.remove(0);
                promoted.push((i as u16, p.primary));
            }
        }
        next.migrations
            .retain(|m| !dead.contains(&m.source) && !dead.contains(&m.target));
        (next, promoted)
    }

    /// Adds backups to under-replicated shards, preferring servers holding
    /// the fewest replicas. Returns `(shard, new backup)` pairs.
    pub fn with_backups_restored(&self, k: usize) -> (Self, Vec<(u16, ServerId)>) {
        let mut next = self.clone();
        next.term += 1;
        let mut load: BTreeMap<ServerId, usize> = next.membership.iter().map(|&s| (s, 0)).collect();
        for p in &next.shards {
            for r in p.replicas() {
                *load.entry(r).or_default() += 1;
            }
        }
        let want = k.min(next.membership.len());
        let mut added = Vec::new();
        for (i, p) in next.shards.iter_mut().enumerate() {
            while p.backups.len() + 1 < want {
                let Some(&s) = load
                    .iter()
                    .filter(|(s, _)| !p.holds(**s))
                    .min_by_key(|(s, n)| (**n, **s))
                    .map(|(s, _)| s)
                else {
                    break;
                };
                p.backups.push(s);
                *load.get_mut(&s).expect("member") += 1;
                added.push((i as u16, s));
            }
        }
        (next, added)
    }

    pub fn under_replicated(&self, k: usize) -> bool {
        let want = k.min(self.membership.len());
        self.shards.iter().any(|p| p.backups.len() + 1 < want)
    }
}

/// Durable single-writer register for configurations. A write becomes the
/// latest configuration immediately; commit marks it final.
#[derive(Debug, Clone)]
pub struct ConfigStore {
    committed: Configuration,
    pending: Option<Configuration>,
    history: Vec<u64>,
}

impl ConfigStore {
    pub fn new(initial: Configuration) -> Self {
        Self {
            history: vec![initial.term],
            committed: initial,
            pending: None,
        }
    }

    pub fn committed(&self) -> &Configuration {
        &self.committed
    }

    /// Newest written configuration, committed or not.
    pub fn latest(&self) -> &Configuration {
        self.pending.as_ref().unwrap_or(&self.committed)
    }

    pub fn pending(&self) -> Option<&Configuration> {
        self.pending.as_ref()
    }

    pub fn write(&mut self, cfg: Configuration) -> Result<(), ConfigError> {
        let old = self.latest().term;
        if cfg.term <= old {
            return Err(ConfigError::StaleTerm { old, new: cfg.term });
        }
        self.pending = Some(cfg);
        Ok(())
    }

    pub fn commit(&mut self, term: u64) -> Result<&Configuration, ConfigError> {
        match self.pending.take() {
            Some(p) if p.term == term => {
                self.history.push(term);
                self.committed = p;
                Ok(&self.committed)
            }
            other => {
                self.pending = other;
                Err(ConfigError::NoPending(term))
            }
        }
    }

    /// Drops an uncommitted write, as a restarted manager would.
    pub fn abandon_pending(&mut self) -> Option<Configuration> {
        self.pending.take()
    }

    /// Terms of committed configurations in commit order.
    pub fn history(&self) -> &[u64] {
        &self.history
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub holder: ServerId,
    pub expiry: Time,
    pub period: Time,
}

impl Lease {
    pub fn new(holder: ServerId, now: Time, period: Time) -> Self {
        Self {
            holder,
            expiry: now + period,
            period,
        }
    }

    pub fn renew(&mut self, now: Time) {
        self.expiry = now + self.period;
    }

    pub fn expired(&self, now: Time) -> bool {
        now >= self.expiry
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceRule {
    /// Overloaded above `(1 + overload) * average`.
    pub overload: f64,
    /// Targets within `(1 + slack) * average` after moves.
    pub slack: f64,
}

impl Default for BalanceRule {
    fn default() -> Self {
        Self {
            overload: 0.30,
            slack: 0.05,
        }
    }
}

impl BalanceRule {
    pub fn overloaded(&self, loads: &BTreeMap<ServerId, f64>) -> Vec<ServerId> {
        if loads.is_empty() {
            return Vec::new();
        }
        let avg = loads.values().sum::<f64>() / loads.len() as f64;
        loads
            .iter()
            .filter(|(_, &l)| l > (1.0 + self.overload) * avg)
            .map(|(&s, _)| s)
            .collect()
    }

    /// Greedy plan: overloaded servers hottest first; each gives away its
    /// hottest primary shards to the coldest server that does not already
    /// hold a replica, as long as the target stays within the slack.
    pub fn plan(
        &self,
        cfg: &Configuration,
        server_load: &BTreeMap<ServerId, f64>,
        shard_load: &BTreeMap<u16, f64>,
    ) -> Vec<Migration> {
        let mut load = server_load.clone();
        for s in &cfg.membership {
            load.entry(*s).or_insert(0.0);
        }
        let avg = load.values().sum::<f64>() / load.len().max(1) as f64;
        let cap = (1.0 + self.slack) * avg;
        let mut hot = self.overloaded(&load);
        hot.sort_by(|a, b| load[b].total_cmp(&load[a]).then(a.cmp(b)));
        let busy: BTreeSet<u16> = cfg.migrations.iter().map(|m| m.shard).collect();
        let mut out = Vec::new();
        for src in hot {
            let mut shards: Vec<u16> = cfg
                .primaries_of(src)
                .filter(|s| !busy.contains(s))
                .collect();
            shards.sort_by(|a, b| {
                let (la, lb) = (shard_load.get(a).unwrap_or(&0.0), shard_load.get(b).unwrap_or(&0.0));
                lb.total_cmp(la).then(a.cmp(b))
            });
            for shard in shards {
                if load[&src] <= cap {
                    break;
                }
                let l = shard_load.get(&shard).copied().unwrap_or(0.0);
                if l <= 0.0 {
                    continue;
                }
                let p = cfg.placement(shard);
                let target = load
                    .iter()
                    .filter(|(s, _)| !p.holds(**s))
                    .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(b.0)))
                    .map(|(s, _)| *s);
                let Some(target) = target else { continue };
                if load[&target] + l > cap {
                    continue;
                }
                *load.get_mut(&src).expect("member") -= l;
                *load.get_mut(&target).expect("member") += l;
                out.push(Migration {
                    source: src,
                    target,
                    shard,
                });
            }
        }
        out
    }
}
