//! Server-local storage: log entry format, segments, indexes, digest and GC.

pub mod digest;
pub mod entry;
pub mod index;
pub mod replication;
pub mod segment;
pub mod server;

pub use replication::Strategy;
pub use entry::{EntryLimits, LogEntry, OpType};
pub use server::{KvError, KvServer, Role, ServerConfig};
