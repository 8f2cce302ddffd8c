//! Timed event scripts (kill, hotspot shift, migration) and the throughput
//! timeline they produce.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::workload::{Hotspot, SharedWorkload, Workload, WorkloadSpec};
use super::BenchError;
use crate::cluster::{Cluster, ClusterConfig, Migration};
use crate::kv::Strategy;
use crate::{Time, NS_PER_MS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioCluster {
    pub servers: u32,
    pub workers: usize,
    pub shards: u16,
    pub replication: usize,
    pub clients: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub pm_capacity: u64,
    pub segment_size: u64,
    pub xpbuffer_capacity: usize,
    pub jitter_ns: Time,
    pub lease_ms: u64,
    pub load_window_ms: u64,
    pub auto_balance: bool,
    pub check_single_owner: bool,
}

impl Default for ScenarioCluster {
    fn default() -> Self {
        let d = ClusterConfig::default();
        Self {
            servers: d.servers,
            workers: d.workers,
            shards: d.shards,
            replication: d.replication,
            clients: d.clients,
            strategy: Strategy::Rowan,
            seed: 1,
            pm_capacity: d.server.pm_capacity,
            segment_size: d.server.segment_size,
            xpbuffer_capacity: d.xpbuffer_capacity,
            jitter_ns: d.fabric.jitter,
            lease_ms: d.timing.lease / NS_PER_MS,
            load_window_ms: d.timing.load_window / NS_PER_MS,
            auto_balance: false,
            check_single_owner: true,
        }
    }
}

impl ScenarioCluster {
    pub fn to_config(&self) -> ClusterConfig {
        let mut c = ClusterConfig {
            servers: self.servers,
            workers: self.workers,
            shards: self.shards,
            replication: self.replication,
            clients: self.clients,
            strategy: self.strategy,
            xpbuffer_capacity: self.xpbuffer_capacity,
            auto_balance: self.auto_balance,
            check_single_owner: self.check_single_owner,
            ..ClusterConfig::default()
        };
        c.server.pm_capacity = self.pm_capacity;
        c.server.segment_size = self.segment_size;
        c.fabric.seed = self.seed;
        c.fabric.jitter = self.jitter_ns;
        c.timing.lease = self.lease_ms * NS_PER_MS;
        c.timing.lease_renew = (c.timing.lease / 3).max(1);
        c.timing.load_window = self.load_window_ms * NS_PER_MS;
        c.sync();
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Start,
    Stop,
    Kill {
        server: u32,
    },
    /// Sends `fraction` of requests to the shards led by `server` (or to
    /// the listed shards).
    Hotspot {
        #[serde(default)]
        server: Option<u32>,
        #[serde(default)]
        shards: Vec<u16>,
        fraction: f64,
    },
    ClearHotspot,
    Migrate {
        source: u32,
        target: u32,
        shard: u16,
    },
    PutRatio {
        ratio: f64,
    },
    Measure {
        label: String,
    },
}

impl Action {
    fn label(&self) -> String {
        match self {
            Action::Start => "start".into(),
            Action::Stop => "stop".into(),
            Action::Kill { server } => format!("kill {server}"),
            Action::Hotspot { .. } => "hotspot".into(),
            Action::ClearHotspot => "hotspot cleared".into(),
            Action::Migrate { source, target, shard } => format!("migrate {shard} {source}->{target}"),
            Action::PutRatio { ratio } => format!("put ratio {ratio}"),
            Action::Measure { label } => label.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub duration_ms: u64,
    #[serde(default)]
    pub cluster: ScenarioCluster,
    pub workload: WorkloadSpec,
    pub events: Vec<Event>,
}

impl Scenario {
    pub fn from_toml(s: &str) -> Result<Self, BenchError> {
        let sc: Scenario = toml::from_str(s).map_err(|e| BenchError::Scenario(e.to_string()))?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_toml(&self) -> Result<String, BenchError> {
        toml::to_string_pretty(self).map_err(|e| BenchError::Scenario(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.workload.validate()?;
        self.cluster.to_config().validate()?;
        if self.events.windows(2).any(|w| w[0].at_ms > w[1].at_ms) {
            return Err(BenchError::Scenario("events must be ordered by time".into()));
        }
        for e in &self.events {
            let bad = match &e.action {
                Action::Kill { server } => *server >= self.cluster.servers,
                Action::Migrate { source, target, shard } => {
                    *source >= self.cluster.servers || *target >= self.cluster.servers || *shard >= self.cluster.shards
                }
                Action::Hotspot { server, fraction, .. } => {
                    server.is_some_and(|s| s >= self.cluster.servers) || !(0.0..=1.0).contains(fraction)
                }
                _ => false,
            };
            if bad {
                return Err(BenchError::Scenario(format!("invalid event at {}ms: {:?}", e.at_ms, e.action)));
            }
        }
        Ok(())
    }

    /// Kill one server while a read-write workload runs.
    pub fn failover() -> Self {
        Self {
            name: "failover".into(),
            duration_ms: 120,
            cluster: ScenarioCluster::default(),
            workload: WorkloadSpec {
                key_count: 20_000,
                ..WorkloadSpec::a()
            },
            events: vec![
                Event { at_ms: 0, action: Action::Start },
                Event { at_ms: 40, action: Action::Kill { server: 0 } },
            ],
        }
    }

    /// Shift load onto one server and let the balancer move shards away.
    pub fn reshard() -> Self {
        Self {
            name: "reshard".into(),
            duration_ms: 400,
            cluster: ScenarioCluster {
                servers: 4,
                shards: 16,
                clients: 16,
                auto_balance: true,
                load_window_ms: 100,
                ..ScenarioCluster::default()
            },
            workload: WorkloadSpec {
                key_count: 20_000,
                ..WorkloadSpec::a()
            },
            events: vec![
                Event { at_ms: 0, action: Action::Start },
                Event {
                    at_ms: 50,
                    action: Action::Hotspot {
                        server: Some(0),
                        shards: Vec::new(),
                        fraction: 0.6,
                    },
                },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub time_ms: u64,
    /// Completed operations per second over this millisecond.
    pub throughput_ops: u64,
    pub phase: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub timeline: Vec<TimelineRow>,
    pub markers: Vec<(Time, String)>,
    pub acked_puts: u64,
    pub oracle_violations: Vec<String>,
    pub owner_violations: Vec<String>,
    pub commit_violations: Vec<String>,
    pub replicas_equal: bool,
    pub final_term: u64,
}

pub fn run_scenario(sc: &Scenario) -> Result<ScenarioResult, BenchError> {
    sc.validate()?;
    let cfg = sc.cluster.to_config();
    let wl = Rc::new(RefCell::new(Workload::new(sc.workload)?));
    let mut c = Cluster::new(cfg, Box::new(SharedWorkload(wl.clone())))?;
    let mut phases: Vec<(u64, String)> = Vec::new();
    for e in &sc.events {
        c.run_until(e.at_ms * NS_PER_MS);
        phases.push((e.at_ms, e.action.label()));
        c.marker(e.action.label());
        match &e.action {
            Action::Start => c.start_clients(),
            Action::Stop => c.stop_clients(),
            Action::Kill { server } => c.crash(*server),
            Action::Hotspot { server, shards, fraction } => {
                let mut list = shards.clone();
                if let Some(s) = server {
                    list.extend(c.store().committed().primaries_of(*s));
                }
                wl.borrow_mut().set_hotspot(Some(Hotspot {
                    shards: list,
                    shard_count: cfg.shards,
                    fraction: *fraction,
                }));
            }
            Action::ClearHotspot => wl.borrow_mut().set_hotspot(None),
            Action::Migrate { source, target, shard } => c.request_migrations(vec![Migration {
                source: *source,
                target: *target,
                shard: *shard,
            }]),
            Action::PutRatio { ratio } => wl.borrow_mut().set_put_ratio(*ratio)?,
            Action::Measure { .. } => {}
        }
    }
    c.run_until(sc.duration_ms * NS_PER_MS);
    c.stop_clients();
    c.run_for(c.config().timing.client_timeout);
    c.verify_acked();

    let counts: &BTreeMap<u64, u64> = c.throughput_timeline();
    let timeline = (0..sc.duration_ms)
        .map(|ms| TimelineRow {
            time_ms: ms,
            throughput_ops: counts.get(&ms).copied().unwrap_or(0) * 1000,
            phase: phases
                .iter()
                .rev()
                .find(|(t, _)| *t <= ms)
                .map_or_else(|| "idle".into(), |(_, l)| l.clone()),
        })
        .collect();
    let st = c.stats();
    Ok(ScenarioResult {
        timeline,
        markers: c.markers().to_vec(),
        acked_puts: st.puts_acked,
        oracle_violations: c.oracle().violations().to_vec(),
        owner_violations: st.owner_violations.clone(),
        commit_violations: st.commit_violations.clone(),
        replicas_equal: st.replica_checks.iter().all(|r| r.equal),
        final_term: c.store().committed().term,
    })
}

pub fn write_timeline_csv<W: std::io::Write>(rows: &[TimelineRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
