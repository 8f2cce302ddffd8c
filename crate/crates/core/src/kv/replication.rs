//! Replication strategies and the sender-side bookkeeping they need.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::{Time, NS_PER_US};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Strategy {
    /// SEND + READ into the backup's single sequential b-log.
    Rowan,
    /// Message to a backup worker that appends to its own b-log.
    Rpc,
    /// One-sided WRITE into a b-log private to (primary worker, backup).
    Write,
    /// Like `Write`, but small entries are grouped per destination.
    Batch,
    /// One-sided WRITE into a b-log shared by all workers of a primary.
    Share,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Rowan,
        Strategy::Rpc,
        Strategy::Write,
        Strategy::Batch,
        Strategy::Share,
    ];

    /// Backup logs each server hosts in an `m`-server cluster with `n`
    /// workers per server.
    pub fn blogs_per_server(self, m: usize, n: usize) -> usize {
        match self {
            Strategy::Rowan => 1,
            Strategy::Rpc => n,
            Strategy::Write | Strategy::Batch => m.saturating_sub(1) * n,
            Strategy::Share => m.saturating_sub(1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Rowan => "ROWAN",
            Strategy::Rpc => "RPC",
            Strategy::Write => "WRITE",
            Strategy::Batch => "BATCH",
            Strategy::Share => "SHARE",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|x| x.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

/// A fixed region of backup PM used as a circular append log.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogRegion {
    pub base: u64,
    pub len: u64,
    pub tail: u64,
}

impl LogRegion {
    pub fn new(base: u64, len: u64) -> Self {
        Self { base, len, tail: 0 }
    }

    /// Address for the next `n` bytes; wraps to the start when the rest of
    /// the region is too short.
    pub fn reserve(&mut self, n: u64) -> u64 {
        assert!(n <= self.len, "append of {n} bytes exceeds region");
        if self.tail + n > self.len {
            self.tail = 0;
        }
        let at = self.base + self.tail;
        self.tail += n;
        at
    }
}

pub const BATCH_THRESHOLD: usize = 256;
pub const BATCH_TIMEOUT: Time = 5 * NS_PER_US;

/// Entries gathered for one destination.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Batch {
    pub puts: Vec<u64>,
    pub bytes: Vec<u8>,
}

/// Accumulates entries until `threshold` bytes or `timeout` after the
/// first entry.
#[derive(Debug, Clone)]
pub struct BatchBuffer {
    pub threshold: usize,
    pub timeout: Time,
    open: Batch,
    opened_at: Option<Time>,
    generation: u64,
}

impl Default for BatchBuffer {
    fn default() -> Self {
        Self::new(BATCH_THRESHOLD, BATCH_TIMEOUT)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BatchAction {
    /// Send this batch now.
    Flush(Batch),
    /// First entry of a new batch: arm a timer for `deadline` tagged with
    /// `generation`.
    Arm { deadline: Time, generation: u64 },
    Wait,
}

impl BatchBuffer {
    pub fn new(threshold: usize, timeout: Time) -> Self {
        Self {
            threshold,
            timeout,
            open: Batch::default(),
            opened_at: None,
            generation: 0,
        }
    }

    pub fn push(&mut self, put: u64, entry: &[u8], now: Time) -> BatchAction {
        let first = self.opened_at.is_none();
        if first {
            self.opened_at = Some(now);
        }
        self.open.puts.push(put);
        self.open.bytes.extend_from_slice(entry);
        if self.open.bytes.len() >= self.threshold {
            return BatchAction::Flush(self.take());
        }
        if first {
            BatchAction::Arm {
                deadline: now + self.timeout,
                generation: self.generation,
            }
        } else {
            BatchAction::Wait
        }
    }

    /// Timer expiry; stale timers of already flushed batches do nothing.
    pub fn expire(&mut self, generation: u64) -> Option<Batch> {
        (generation == self.generation && self.opened_at.is_some()).then(|| self.take())
    }

    fn take(&mut self) -> Batch {
        self.opened_at = None;
        self.generation += 1;
        std::mem::take(&mut self.open)
    }

    pub fn pending_bytes(&self) -> usize {
        self.open.bytes.len()
    }
}
