//! Multi-server cluster on one deterministic event loop: clients, request
//! routing, replication, the configuration manager, failover, resharding
//! and cold start.

pub mod config;
pub mod oracle;
mod sim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{BalanceRule, ConfigStore, Configuration, Lease, Migration, Placement, ServerId};
pub use oracle::{Observed, Oracle};
pub use sim::{Cluster, ClusterStats, ReplicaCheck};

use crate::fabric::{FabricConfig, FabricError};
use crate::kv::{KvError, ServerConfig, Strategy};
use crate::pm::PmConfig;
use crate::rowan::{RowanConfig, RowanError};
use crate::{Time, NS_PER_MS, NS_PER_US};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid cluster configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Rowan(#[from] RowanError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpKind {
    Put { value_len: usize },
    Del,
    Get,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientOp {
    pub kind: OpKind,
    pub key: Vec<u8>,
}

/// Supplies client operations; `None` stops the asking client.
pub trait OpSource {
    fn next_op(&mut self, client: usize, now: Time) -> Option<ClientOp>;
}

impl<F: FnMut(usize, Time) -> Option<ClientOp>> OpSource for F {
    fn next_op(&mut self, client: usize, now: Time) -> Option<ClientOp> {
        self(client, now)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// One-way client to server delay.
    pub client_latency: Time,
    pub put_cpu: Time,
    pub get_cpu: Time,
    pub rpc_cpu: Time,
    pub control_period: Time,
    pub digest_period: Time,
    pub commitver_period: Time,
    pub gc_period: Time,
    pub retry_period: Time,
    pub lease: Time,
    pub lease_renew: Time,
    pub cm_period: Time,
    /// One-way server to manager delay.
    pub cm_latency: Time,
    pub store_write: Time,
    pub phase2_delay: Time,
    pub client_timeout: Time,
    pub client_backoff: Time,
    pub stream_window: usize,
    pub chunk_bytes: usize,
    pub load_window: Time,
}

impl Default for Timing {
    fn default() -> Self {
        Self {
            client_latency: NS_PER_US,
            put_cpu: 450,
            get_cpu: 250,
            rpc_cpu: 350,
            control_period: 200 * NS_PER_US,
            digest_period: 200 * NS_PER_US,
            commitver_period: 15 * NS_PER_MS,
            gc_period: 5 * NS_PER_MS,
            retry_period: 250 * NS_PER_US,
            lease: 10 * NS_PER_MS,
            lease_renew: 3 * NS_PER_MS,
            cm_period: NS_PER_MS,
            cm_latency: 2 * NS_PER_US,
            store_write: 200 * NS_PER_US,
            phase2_delay: 500 * NS_PER_US,
            client_timeout: 20 * NS_PER_MS,
            client_backoff: 20 * NS_PER_US,
            stream_window: 32,
            chunk_bytes: 32 << 10,
            load_window: 500 * NS_PER_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub servers: u32,
    pub workers: usize,
    pub shards: u16,
    pub replication: usize,
    pub strategy: Strategy,
    pub clients: usize,
    pub server: ServerConfig,
    pub xpbuffer_capacity: usize,
    pub fabric: FabricConfig,
    pub rowan: RowanConfig,
    pub timing: Timing,
    /// Background digest, CommitVer and control loops (ROWAN only).
    pub background: bool,
    pub gc: bool,
    pub auto_balance: bool,
    pub check_single_owner: bool,
    /// Bytes of backup PM per baseline b-log.
    pub baseline_region: u64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            servers: 3,
            workers: 4,
            shards: 12,
            replication: 3,
            strategy: Strategy::Rowan,
            clients: 12,
            server: ServerConfig {
                pm_capacity: 64 << 20,
                segment_size: 1 << 20,
                workers: 4,
                digest_actors: 2,
                index_buckets: 256,
                shards: 12,
                ..ServerConfig::default()
            },
            xpbuffer_capacity: crate::pm::XPBUFFER_LINES,
            fabric: FabricConfig::default(),
            rowan: RowanConfig {
                initial_post: 8,
                batch: 2,
                ..RowanConfig::default()
            },
            timing: Timing::default(),
            background: true,
            gc: true,
            auto_balance: false,
            check_single_owner: false,
            baseline_region: 1 << 20,
        }
    }
}

impl ClusterConfig {
    /// Six servers with 24 workers each, as in the evaluation setup.
    pub fn six_by_24(strategy: Strategy) -> Self {
        let mut c = Self {
            servers: 6,
            workers: 24,
            shards: 48,
            strategy,
            clients: 8 * 6 * 24,
            ..Self::default()
        };
        c.fabric.jitter = 3_000;
        c.server.pm_capacity = 512 << 20;
        c.server.index_buckets = 4096;
        c.rowan.initial_post = 16;
        c.rowan.batch = 4;
        c.sync();
        c
    }

    /// Copies cluster-wide settings into the per-server configuration.
    pub fn sync(&mut self) {
        self.server.workers = self.workers;
        self.server.shards = self.shards;
        self.server.mtu = self.fabric.mtu as usize;
    }

    pub fn pm_config(&self) -> PmConfig {
        PmConfig {
            xpbuffer_capacity: self.xpbuffer_capacity,
            ..PmConfig::with_capacity(self.server.pm_capacity)
        }
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.servers == 0 || self.workers == 0 || self.shards == 0 {
            return Err(ClusterError::Config("servers, workers and shards must be positive".into()));
        }
        if self.replication == 0 || self.replication > self.servers as usize {
            return Err(ClusterError::Config(format!(
                "replication factor {} with {} servers",
                self.replication, self.servers
            )));
        }
        if self.server.workers != self.workers || self.server.shards != self.shards {
            return Err(ClusterError::Config("call sync() after changing workers or shards".into()));
        }
        self.rowan.validate()?;
        Ok(())
    }
}
