//! Segment lifecycle and the PM-resident segment meta table.
//!
//! The device is carved into fixed-size segments. The first segments hold
//! the meta table, 16 bytes per data segment: `state u8, owner u8,
//! tag u16, reserved [u8; 12]`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pm::{PmDevice, PmError};
use crate::rowan::SegmentSource;

pub const META_ENTRY_LEN: u64 = 16;
pub const DEFAULT_SEGMENT_SIZE: u64 = 4 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SegState {
    Free = 0,
    Using = 1,
    Used = 2,
    Committed = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum SegOwner {
    None = 0,
    Worker = 1,
    Control = 2,
    Clean = 3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub state: SegState,
    pub owner: SegOwner,
    /// Worker index for t-log segments.
    pub tag: u16,
}

impl SegmentMeta {
    const FREE: Self = Self {
        state: SegState::Free,
        owner: SegOwner::None,
        tag: 0,
    };

    fn encode(&self) -> [u8; META_ENTRY_LEN as usize] {
        let mut b = [0u8; META_ENTRY_LEN as usize];
        b[0] = self.state as u8;
        b[1] = self.owner as u8;
        b[2..4].copy_from_slice(&self.tag.to_le_bytes());
        b
    }

    fn decode(b: &[u8]) -> Option<Self> {
        let state = match b[0] {
            0 => SegState::Free,
            1 => SegState::Using,
            2 => SegState::Used,
            3 => SegState::Committed,
            _ => return None,
        };
        let owner = match b[1] {
            0 => SegOwner::None,
            1 => SegOwner::Worker,
            2 => SegOwner::Control,
            3 => SegOwner::Clean,
            _ => return None,
        };
        Some(Self {
            state,
            owner,
            tag: u16::from_le_bytes([b[2], b[3]]),
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("illegal transition of segment {id}: {from:?} -> {to:?} (owner {owner:?})")]
    IllegalTransition {
        id: u32,
        from: SegState,
        to: SegState,
        owner: SegOwner,
    },
    #[error("unknown segment {0}")]
    Unknown(u32),
    #[error("device too small for segment size {0}")]
    TooSmall(u64),
    #[error("corrupt meta entry for segment {0}")]
    CorruptMeta(u32),
    #[error(transparent)]
    Pm(#[from] PmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLayout {
    pub segment_size: u64,
    pub data_base: u64,
    pub count: u32,
}

impl SegmentLayout {
    pub fn new(capacity: u64, segment_size: u64) -> Result<Self, SegmentError> {
        if segment_size < 4096 || segment_size % 256 != 0 {
            return Err(SegmentError::TooSmall(segment_size));
        }
        let total = capacity / segment_size;
        let meta_segs = (total * META_ENTRY_LEN).div_ceil(segment_size).max(1);
        if total <= meta_segs {
            return Err(SegmentError::TooSmall(segment_size));
        }
        let count = (total - meta_segs).min(u32::MAX as u64) as u32;
        Ok(Self {
            segment_size,
            data_base: meta_segs * segment_size,
            count,
        })
    }

    pub fn base(&self, id: u32) -> u64 {
        self.data_base + id as u64 * self.segment_size
    }

    pub fn id_of(&self, addr: u64) -> Option<u32> {
        if addr < self.data_base {
            return None;
        }
        let id = (addr - self.data_base) / self.segment_size;
        (id < self.count as u64).then_some(id as u32)
    }

    pub fn meta_addr(&self, id: u32) -> u64 {
        id as u64 * META_ENTRY_LEN
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub transitions: u64,
    pub freed: u64,
    pub alloc_failures: u64,
}

#[derive(Debug, Clone)]
pub struct SegmentTable {
    layout: SegmentLayout,
    metas: Vec<SegmentMeta>,
    free: BTreeSet<u32>,
    stats: SegmentStats,
}

impl SegmentTable {
    /// A table over a zeroed device: every segment Free.
    pub fn new(layout: SegmentLayout) -> Self {
        Self {
            layout,
            metas: vec![SegmentMeta::FREE; layout.count as usize],
            free: (0..layout.count).collect(),
            stats: SegmentStats::default(),
        }
    }

    /// Rebuilds the table from the persisted meta entries.
    pub fn load(layout: SegmentLayout, pm: &PmDevice) -> Result<Self, SegmentError> {
        let raw = pm.read(0, layout.count as usize * META_ENTRY_LEN as usize)?;
        let mut t = Self::new(layout);
        t.free.clear();
        for (i, chunk) in raw.chunks(META_ENTRY_LEN as usize).enumerate() {
            let m = SegmentMeta::decode(chunk).ok_or(SegmentError::CorruptMeta(i as u32))?;
            t.metas[i] = m;
            if m.state == SegState::Free {
                t.free.insert(i as u32);
            }
        }
        Ok(t)
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn stats(&self) -> SegmentStats {
        self.stats
    }

    pub fn meta(&self, id: u32) -> SegmentMeta {
        self.metas[id as usize]
    }

    pub fn base(&self, id: u32) -> u64 {
        self.layout.base(id)
    }

    pub fn segment_size(&self) -> u64 {
        self.layout.segment_size
    }

    pub fn free_count(&self) -> usize {
        self.free.len()
    }

    pub fn ids_in(&self, state: SegState) -> Vec<u32> {
        (0..self.layout.count)
            .filter(|&i| self.metas[i as usize].state == state)
            .collect()
    }

    pub fn ids_where(&self, f: impl Fn(SegmentMeta) -> bool) -> Vec<u32> {
        (0..self.layout.count)
            .filter(|&i| f(self.metas[i as usize]))
            .collect()
    }

    fn legal(from: SegState, to: SegState, owner: SegOwner) -> bool {
        use SegState::*;
        match (from, to) {
            (Free, Using) => owner != SegOwner::None,
            (Using, Committed) => matches!(owner, SegOwner::Worker | SegOwner::Clean),
            (Using, Used) => owner == SegOwner::Control,
            (Used, Committed) => true,
            (Committed, Free) => true,
            _ => false,
        }
    }

    fn persist(&self, pm: &mut PmDevice, id: u32) -> Result<(), SegmentError> {
        pm.write(self.layout.meta_addr(id), &self.metas[id as usize].encode())?;
        Ok(())
    }

    pub fn transition(&mut self, pm: &mut PmDevice, id: u32, to: SegState) -> Result<(), SegmentError> {
        let m = *self.metas.get(id as usize).ok_or(SegmentError::Unknown(id))?;
        if !Self::legal(m.state, to, m.owner) {
            return Err(SegmentError::IllegalTransition {
                id,
                from: m.state,
                to,
                owner: m.owner,
            });
        }
        let meta = &mut self.metas[id as usize];
        meta.state = to;
        if to == SegState::Free {
            meta.owner = SegOwner::None;
            meta.tag = 0;
            self.free.insert(id);
        }
        self.stats.transitions += 1;
        self.persist(pm, id)
    }

    /// Takes the lowest-addressed Free segment (Free -> Using).
    pub fn allocate(&mut self, pm: &mut PmDevice, owner: SegOwner, tag: u16) -> Option<u32> {
        let Some(id) = self.free.pop_first() else {
            self.stats.alloc_failures += 1;
            return None;
        };
        self.metas[id as usize] = SegmentMeta {
            state: SegState::Using,
            owner,
            tag,
        };
        self.stats.transitions += 1;
        self.persist(pm, id).expect("meta table is in range");
        Some(id)
    }

    /// Committed -> Free, zeroing the first `used_len` bytes so stale
    /// blocks are never mistaken for log content.
    pub fn release(&mut self, pm: &mut PmDevice, id: u32, used_len: u64) -> Result<(), SegmentError> {
        let len = used_len.min(self.layout.segment_size);
        let len = len.div_ceil(256) * 256;
        self.transition(pm, id, SegState::Free)?;
        if len > 0 {
            pm.zero_range(self.base(id), len.min(self.layout.segment_size))?;
        }
        self.stats.freed += 1;
        Ok(())
    }
}

impl SegmentSource for SegmentTable {
    fn segment_size(&self) -> u64 {
        self.layout.segment_size
    }

    fn allocate(&mut self, pm: &mut PmDevice) -> Option<(u32, u64)> {
        let id = SegmentTable::allocate(self, pm, SegOwner::Control, 0)?;
        Some((id, self.base(id)))
    }

    fn mark_used(&mut self, pm: &mut PmDevice, id: u32) {
        self.transition(pm, id, SegState::Used)
            .expect("control-owned segment moves Using -> Used");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> (PmDevice, SegmentTable) {
        let pm = PmDevice::with_capacity(64 * 65536);
        let layout = SegmentLayout::new(pm.capacity(), 65536).unwrap();
        (pm, SegmentTable::new(layout))
    }

    #[test]
    fn layout_reserves_meta_segment() {
        let l = SegmentLayout::new(64 * 65536, 65536).unwrap();
        assert_eq!(l.data_base, 65536);
        assert_eq!(l.count, 63);
        assert_eq!(l.id_of(l.base(5) + 100), Some(5));
        assert_eq!(l.id_of(10), None);
    }

    #[test]
    fn worker_path() {
        let (mut pm, mut t) = table();
        let id = t.allocate(&mut pm, SegOwner::Worker, 3).unwrap();
        assert_eq!(id, 0);
        t.transition(&mut pm, id, SegState::Committed).unwrap();
        t.release(&mut pm, id, 1000).unwrap();
        assert_eq!(t.meta(id).state, SegState::Free);
    }

    #[test]
    fn backup_path_and_illegal_moves() {
        let (mut pm, mut t) = table();
        let id = t.allocate(&mut pm, SegOwner::Control, 0).unwrap();
        assert!(matches!(
            t.transition(&mut pm, id, SegState::Committed),
            Err(SegmentError::IllegalTransition { .. })
        ));
        t.transition(&mut pm, id, SegState::Used).unwrap();
        assert!(t.transition(&mut pm, id, SegState::Free).is_err());
        t.transition(&mut pm, id, SegState::Committed).unwrap();
        t.transition(&mut pm, id, SegState::Free).unwrap();
        let w = t.allocate(&mut pm, SegOwner::Worker, 0).unwrap();
        assert!(t.transition(&mut pm, w, SegState::Used).is_err());
    }

    #[test]
    fn meta_table_survives_reload() {
        let (mut pm, mut t) = table();
        let a = t.allocate(&mut pm, SegOwner::Worker, 7).unwrap();
        let b = t.allocate(&mut pm, SegOwner::Control, 0).unwrap();
        t.transition(&mut pm, b, SegState::Used).unwrap();
        pm.crash();
        let r = SegmentTable::load(*t.layout(), &pm).unwrap();
        assert_eq!(
            r.meta(a),
            SegmentMeta {
                state: SegState::Using,
                owner: SegOwner::Worker,
                tag: 7
            }
        );
        assert_eq!(r.meta(b).state, SegState::Used);
        assert_eq!(r.free_count(), t.free_count());
    }

    #[test]
    fn release_zeroes_used_range() {
        let (mut pm, mut t) = table();
        let id = t.allocate(&mut pm, SegOwner::Clean, 0).unwrap();
        let base = t.base(id);
        pm.write(base, &[9u8; 300]).unwrap();
        t.transition(&mut pm, id, SegState::Committed).unwrap();
        t.release(&mut pm, id, 300).unwrap();
        assert_eq!(pm.read(base, 300).unwrap(), vec![0u8; 300]);
    }
}
