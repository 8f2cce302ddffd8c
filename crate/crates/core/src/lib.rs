//! Deterministic simulator for a persistent-memory replicated key-value
//! store built on a SEND-based remote persistence primitive.

pub mod bench;
pub mod cluster;
pub mod fabric;
pub mod kv;
pub mod pm;
pub mod rowan;

/// Simulated time in nanoseconds.
pub type Time = u64;

pub const NS_PER_US: Time = 1_000;
pub const NS_PER_MS: Time = 1_000_000;
