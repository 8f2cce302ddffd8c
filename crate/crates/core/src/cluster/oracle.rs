//! Shadow map of acknowledged writes used to judge every read.
//!
//! Values carry a unique 8-byte token in their first bytes, so a read
//! result identifies exactly which write produced it.

use std::collections::HashMap;

/// What a read observed: the entry version and the token of the value, or
/// `None` for a tombstone or a missing key (version 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observed {
    pub version: u64,
    pub token: Option<u64>,
}

impl Observed {
    pub const ABSENT: Observed = Observed {
        version: 0,
        token: None,
    };
}

pub fn value_for(token: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len.max(8)];
    v[..8].copy_from_slice(&token.to_le_bytes());
    for (i, b) in v[8..].iter_mut().enumerate() {
        *b = (token as u8).wrapping_add(i as u8);
    }
    v
}

pub fn token_of(value: &[u8]) -> Option<u64> {
    value.get(..8).map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

#[derive(Debug, Clone, Default)]
pub struct Oracle {
    acked: HashMap<Vec<u8>, Observed>,
    issued: HashMap<u64, Vec<u8>>,
    violations: Vec<String>,
    checks: u64,
}

impl Oracle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn issue(&mut self, token: u64, key: &[u8]) {
        self.issued.insert(token, key.to_vec());
    }

    /// A write of `token` (or a delete when `None`) was acknowledged with
    /// `version`.
    pub fn ack(&mut self, key: &[u8], version: u64, token: Option<u64>) {
        let e = self.acked.entry(key.to_vec()).or_insert(Observed::ABSENT);
        if version > e.version {
            *e = Observed { version, token };
        }
    }

    /// The newest acknowledged state of `key`.
    pub fn floor(&self, key: &[u8]) -> Observed {
        self.acked.get(key).copied().unwrap_or(Observed::ABSENT)
    }

    /// Checks a read against the floor captured when the read was issued.
    pub fn check(&mut self, key: &[u8], floor: Observed, got: Observed) -> bool {
        self.checks += 1;
        let ok = if got.version < floor.version {
            false
        } else if got.version == floor.version {
            got.token == floor.token
        } else {
            got.token
                .is_none_or(|t| self.issued.get(&t).is_some_and(|k| k == key))
        };
        if !ok {
            self.violations.push(format!(
                "key {:?}: expected at least v{} {:?}, read v{} {:?}",
                String::from_utf8_lossy(key),
                floor.version,
                floor.token,
                got.version,
                got.token
            ));
        }
        ok
    }

    pub fn acked_keys(&self) -> impl Iterator<Item = (&Vec<u8>, &Observed)> {
        self.acked.iter()
    }

    pub fn len(&self) -> usize {
        self.acked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acked.is_empty()
    }

    pub fn violations(&self) -> &[String] {
        &self.violations
    }

    pub fn checks(&self) -> u64 {
        self.checks
    }
}
