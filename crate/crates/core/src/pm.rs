//! Persistent-memory DIMM model.
//!
//! The CPU-visible interface is byte addressable, but the media is written in
//! whole XPLines (256B by default). A small on-device combining buffer (the
//! XPBuffer, 64 lines by default) merges adjacent writes to the same XPLine
//! before they reach the media. Every eviction from the buffer costs one full
//! XPLine media write no matter how much of the line is dirty, which is where
//! device-level write amplification (DLWA) comes from.
//!
//! Writes accepted by [`PmDevice::write`] are durable: the buffer is part of
//! the persistence domain and [`PmDevice::crash`] settles it to media.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Media access granularity.
pub const XPLINE_SIZE: u64 = 256;
/// 16KB of combining buffer at 256B per entry.
pub const XPBUFFER_LINES: usize = 64;
/// CPU cache-line granularity used by the memory controller.
pub const CACHE_LINE: u64 = 64;

const CHUNK_SHIFT: u32 = 16;
const CHUNK_SIZE: u64 = 1 << CHUNK_SHIFT;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PmError {
    #[error("access [{addr:#x}, +{len}) exceeds device capacity {capacity:#x}")]
    OutOfBounds { addr: u64, len: u64, capacity: u64 },
    #[error("write address {addr:#x} is not 8-byte aligned")]
    Misaligned { addr: u64 },
    #[error("no bytes have been requested; DLWA is undefined")]
    UndefinedRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmConfig {
    pub capacity: u64,
    pub xpline_size: u64,
    pub xpbuffer_capacity: usize,
}

impl PmConfig {
    pub fn with_capacity(capacity: u64) -> Self {
        Self {
            capacity,
            xpline_size: XPLINE_SIZE,
            xpbuffer_capacity: XPBUFFER_LINES,
        }
    }
}

/// Cumulative device counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmCounters {
    pub request_bytes: u64,
    pub media_bytes: u64,
    pub writes: u64,
    /// Writes shorter than a cache line or not cache-line aligned.
    pub small_writes: u64,
    pub evictions: u64,
    pub partial_evictions: u64,
}

impl PmCounters {
    pub fn dlwa(&self) -> Result<f64, PmError> {
        if self.request_bytes == 0 {
            return Err(PmError::UndefinedRatio);
        }
        Ok(self.media_bytes as f64 / self.request_bytes as f64)
    }

    /// Counter delta accumulated since `earlier`.
    pub fn since(&self, earlier: &PmCounters) -> PmCounters {
        PmCounters {
            request_bytes: self.request_bytes - earlier.request_bytes,
            media_bytes: self.media_bytes - earlier.media_bytes,
            writes: self.writes - earlier.writes,
            small_writes: self.small_writes - earlier.small_writes,
            evictions: self.evictions - earlier.evictions,
            partial_evictions: self.partial_evictions - earlier.partial_evictions,
        }
    }
}

/// One combining-buffer slot covering a single XPLine.
#[derive(Debug, Clone)]
pub struct XpBufferEntry {
    pub xpline_index: u64,
    dirty_mask: Vec<u64>,
    staged: Vec<u8>,
    pub last_touch: u64,
}

impl XpBufferEntry {
    fn new(xpline_index: u64, line: usize, now: u64) -> Self {
        Self {
            xpline_index,
            dirty_mask: vec![0; line.div_ceil(64)],
            staged: vec![0; line],
            last_touch: now,
        }
    }

    fn stage(&mut self, offset: usize, data: &[u8]) {
        self.staged[offset..offset + data.len()].copy_from_slice(data);
        for i in offset..offset + data.len() {
            self.dirty_mask[i / 64] |= 1 << (i % 64);
        }
    }

    fn is_dirty(&self, i: usize) -> bool {
        self.dirty_mask[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn dirty_bytes(&self) -> usize {
        self.dirty_mask.iter().map(|w| w.count_ones() as usize).sum()
    }
}

/// Sparse, zero-initialized byte store.
#[derive(Debug, Clone)]
struct Media {
    chunks: Vec<Option<Box<[u8]>>>,
}

impl Media {
    fn new(capacity: u64) -> Self {
        let n = capacity.div_ceil(CHUNK_SIZE) as usize;
        Self {
            chunks: vec![None; n],
        }
    }

    fn write(&mut self, mut addr: u64, mut data: &[u8]) {
        while !data.is_empty() {
            let chunk = (addr >> CHUNK_SHIFT) as usize;
            let off = (addr & (CHUNK_SIZE - 1)) as usize;
            let n = data.len().min(CHUNK_SIZE as usize - off);
            let slot = self.chunks[chunk]
                .get_or_insert_with(|| vec![0u8; CHUNK_SIZE as usize].into_boxed_slice());
            slot[off..off + n].copy_from_slice(&data[..n]);
            data = &data[n..];
            addr += n as u64;
        }
    }

    fn read(&self, mut addr: u64, out: &mut [u8]) {
        let mut pos = 0;
        while pos < out.len() {
            let chunk = (addr >> CHUNK_SHIFT) as usize;
            let off = (addr & (CHUNK_SIZE - 1)) as usize;
            let n = (out.len() - pos).min(CHUNK_SIZE as usize - off);
            match &self.chunks[chunk] {
                Some(c) => out[pos..pos + n].copy_from_slice(&c[off..off + n]),
                None => out[pos..pos + n].fill(0),
            }
            pos += n;
            addr += n as u64;
        }
    }
}

#[derive(Debug, Clone)]
pub struct PmDevice {
    config: PmConfig,
    media: Media,
    xpbuffer: Vec<XpBufferEntry>,
    clock: u64,
    counters: PmCounters,
}

impl PmDevice {
    pub fn new(config: PmConfig) -> Self {
        assert!(config.xpline_size > 0 && config.xpbuffer_capacity > 0);
        Self {
            media: Media::new(config.capacity),
            config,
            xpbuffer: Vec::with_capacity(config.xpbuffer_capacity),
            clock: 0,
            counters: PmCounters::default(),
        }
    }

    pub fn with_capacity(capacity: u64) -> Self {
        Self::new(PmConfig::with_capacity(capacity))
    }

    pub fn config(&self) -> &PmConfig {
        &self.config
    }

    pub fn capacity(&self) -> u64 {
        self.config.capacity
    }

    pub fn counters(&self) -> PmCounters {
        self.counters
    }

    pub fn request_bytes(&self) -> u64 {
        self.counters.request_bytes
    }

    pub fn media_bytes(&self) -> u64 {
        self.counters.media_bytes
    }

    pub fn buffered_lines(&self) -> usize {
        self.xpbuffer.len()
    }

    pub fn xpbuffer(&self) -> impl Iterator<Item = &XpBufferEntry> {
        self.xpbuffer.iter()
    }

    fn check_range(&self, addr: u64, len: u64) -> Result<(), PmError> {
        match addr.checked_add(len) {
            Some(end) if end <= self.config.capacity => Ok(()),
            _ => Err(PmError::OutOfBounds {
                addr,
                len,
                capacity: self.config.capacity,
            }),
        }
    }

    /// Accepts a write. The data is durable and immediately visible to reads.
    pub fn write(&mut self, addr: u64, data: &[u8]) -> Result<(), PmError> {
        self.check_range(addr, data.len() as u64)?;
        if addr % 8 != 0 {
            return Err(PmError::Misaligned { addr });
        }
        if data.is_empty() {
            return Ok(());
        }
        self.counters.request_bytes += data.len() as u64;
        self.counters.writes += 1;
        if data.len() as u64 % CACHE_LINE != 0 || addr % CACHE_LINE != 0 {
            self.counters.small_writes += 1;
        }
        let line = self.config.xpline_size;
        let mut cur = addr;
        let mut rest = data;
        while !rest.is_empty() {
            let idx = cur / line;
            let off = (cur % line) as usize;
            let n = rest.len().min(line as usize - off);
            self.clock += 1;
            let now = self.clock;
            let slot = match self.xpbuffer.iter().position(|e| e.xpline_index == idx) {
                Some(i) => i,
                None => {
                    if self.xpbuffer.len() >= self.config.xpbuffer_capacity {
                        self.evict_lru();
                    }
                    self.xpbuffer
                        .push(XpBufferEntry::new(idx, line as usize, now));
                    self.xpbuffer.len() - 1
                }
            };
            let entry = &mut self.xpbuffer[slot];
            entry.stage(off, &rest[..n]);
            entry.last_touch = now;
            rest = &rest[n..];
            cur += n as u64;
        }
        Ok(())
    }

    /// Current logical contents; staged bytes overlay the media.
    pub fn read(&self, addr: u64, len: usize) -> Result<Vec<u8>, PmError> {
        let mut out = vec![0u8; len];
        self.read_into(addr, &mut out)?;
        Ok(out)
    }

    pub fn read_into(&self, addr: u64, out: &mut [u8]) -> Result<(), PmError> {
        self.check_range(addr, out.len() as u64)?;
        self.media.read(addr, out);
        let line = self.config.xpline_size;
        let end = addr + out.len() as u64;
        for e in &self.xpbuffer {
            let lstart = e.xpline_index * line;
            let lend = lstart + line;
            if lend <= addr || lstart >= end {
                continue;
            }
            let from = lstart.max(addr);
            let to = lend.min(end);
            for a in from..to {
                let i = (a - lstart) as usize;
                if e.is_dirty(i) {
                    out[(a - addr) as usize] = e.staged[i];
                }
            }
        }
        Ok(())
    }

    pub fn read_u64(&self, addr: u64) -> Result<u64, PmError> {
        let mut b = [0u8; 8];
        self.read_into(addr, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Writes zeros over a range in cache-line sized pieces.
    pub fn zero_range(&mut self, addr: u64, len: u64) -> Result<(), PmError> {
        self.check_range(addr, len)?;
        let zeros = [0u8; XPLINE_SIZE as usize];
        let mut cur = addr;
        while cur < addr + len {
            let n = (addr + len - cur).min(zeros.len() as u64);
            self.write(cur, &zeros[..n as usize])?;
            cur += n;
        }
        Ok(())
    }

    fn evict_lru(&mut self) {
        let Some((i, _)) = self
            .xpbuffer
            .iter()
            .enumerate()
            .min_by_key(|(_, e)| e.last_touch)
        else {
            return;
        };
        let entry = self.xpbuffer.swap_remove(i);
        self.settle(entry);
    }

    fn settle(&mut self, entry: XpBufferEntry) {
        let line = self.config.xpline_size;
        let base = entry.xpline_index * line;
        // Read-modify-write: merge the dirty bytes over the current media line.
        let mut merged = vec![0u8; line as usize];
        self.media.read(base, &mut merged);
        for (i, b) in merged.iter_mut().enumerate() {
            if entry.is_dirty(i) {
                *b = entry.staged[i];
            }
        }
        self.media.write(base, &merged);
        self.counters.media_bytes += line;
        self.counters.evictions += 1;
        if entry.dirty_bytes() < line as usize {
            self.counters.partial_evictions += 1;
        }
    }

    /// Evicts every buffered line.
    pub fn flush_all(&mut self) {
        let mut entries = std::mem::take(&mut self.xpbuffer);
        entries.sort_by_key(|e| e.last_touch);
        for e in entries {
            self.settle(e);
        }
    }

    /// Power failure: the combining buffer drains to media.
    pub fn crash(&mut self) {
        self.flush_all();
    }

    pub fn dlwa(&self) -> Result<f64, PmError> {
        self.counters.dlwa()
    }

    pub fn reset_counters(&mut self) {
        self.counters = PmCounters::default();
    }
}

/// One labelled counter snapshot, exported as `label,request_bytes,media_bytes,dlwa`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterRow {
    pub label: String,
    pub request_bytes: u64,
    pub media_bytes: u64,
    pub dlwa: f64,
}

impl CounterRow {
    pub fn new(label: impl Into<String>, c: &PmCounters) -> Self {
        Self {
            label: label.into(),
            request_bytes: c.request_bytes,
            media_bytes: c.media_bytes,
            dlwa: c.dlwa().unwrap_or(f64::NAN),
        }
    }
}

pub fn write_counter_csv<W: io::Write>(rows: &[CounterRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["label", "request_bytes", "media_bytes", "dlwa"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dev() -> PmDevice {
        PmDevice::with_capacity(1 << 20)
    }

    #[test]
    fn four_sequential_cache_lines_combine() {
        let mut d = dev();
        for off in [0u64, 64, 128, 192] {
            d.write(off, &[1u8; 64]).unwrap();
        }
        d.flush_all();
        assert_eq!(d.request_bytes(), 256);
        assert_eq!(d.media_bytes(), 256);
        assert_eq!(d.dlwa().unwrap(), 1.0);
    }

    #[test]
    fn single_cache_line_costs_full_xpline() {
        let mut d = dev();
        d.write(0, &[7u8; 64]).unwrap();
        d.flush_all();
        assert_eq!(d.request_bytes(), 64);
        assert_eq!(d.media_bytes(), 256);
        assert_eq!(d.dlwa().unwrap(), 4.0);
    }

    #[test]
    fn interleaved_streams_beyond_capacity_thrash() {
        let mut d = PmDevice::with_capacity(64 << 20);
        let region = 64 * 1024u64;
        for round in 0..64u64 {
            for s in 0..128u64 {
                d.write(s * region + round * 64, &[1u8; 64]).unwrap();
            }
        }
        d.flush_all();
        assert_eq!(d.dlwa().unwrap(), 4.0);
    }

    #[test]
    fn reads() {
        let mut d = dev();
        assert_eq!(d.read(100 * 8, 8).unwrap(), vec![0u8; 8]);
        d.write(0, b"abcd").unwrap();
        assert_eq!(d.read(0, 4).unwrap(), b"abcd");
        let pat: Vec<u8> = (0..64).collect();
        d.write(512, &pat).unwrap();
        assert_eq!(d.read(512 + 32, 8).unwrap(), &pat[32..40]);
        d.flush_all();
        assert_eq!(d.read(512 + 32, 8).unwrap(), &pat[32..40]);
        assert_eq!(d.read(0, 4).unwrap(), b"abcd");
    }

    #[test]
    fn bounds_and_alignment() {
        let mut d = PmDevice::with_capacity(1024);
        assert!(matches!(
            d.write(1020, &[0u8; 8]),
            Err(PmError::OutOfBounds { .. })
        ));
        assert!(matches!(d.read(1000, 100), Err(PmError::OutOfBounds { .. })));
        assert_eq!(d.write(3, &[0u8; 8]), Err(PmError::Misaligned { addr: 3 }));
        assert_eq!(d.dlwa(), Err(PmError::UndefinedRatio));
    }

    #[test]
    fn flush_counting() {
        let mut d = dev();
        d.flush_all();
        assert_eq!(d.media_bytes(), 0);
        d.write(0, &[1u8; 8]).unwrap();
        d.flush_all();
        assert_eq!(d.media_bytes(), 256);
        assert_eq!(d.buffered_lines(), 0);

        let mut d = dev();
        for line in 0..64u64 {
            d.write(line * 256, &[2u8; 256]).unwrap();
        }
        assert_eq!(d.media_bytes(), 0);
        d.flush_all();
        assert_eq!(d.media_bytes(), 16384);
    }

    #[test]
    fn small_writes_are_flagged() {
        let mut d = dev();
        d.write(0, &[0u8; 8]).unwrap();
        d.write(64, &[0u8; 64]).unwrap();
        d.write(136, &[0u8; 64]).unwrap();
        assert_eq!(d.counters().small_writes, 2);
    }

    #[test]
    fn partial_line_read_modify_write_keeps_old_bytes() {
        let mut d = dev();
        d.write(0, &[9u8; 256]).unwrap();
        d.flush_all();
        d.write(64, &[1u8; 64]).unwrap();
        d.flush_all();
        let line = d.read(0, 256).unwrap();
        assert!(line[..64].iter().all(|&b| b == 9));
        assert!(line[64..128].iter().all(|&b| b == 1));
        assert!(line[128..].iter().all(|&b| b == 9));
    }

    #[test]
    fn counter_csv_has_header() {
        let mut d = dev();
        d.write(0, &[1u8; 64]).unwrap();
        d.flush_all();
        let mut buf = Vec::new();
        write_counter_csv(&[CounterRow::new("s0", &d.counters())], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "label,request_bytes,media_bytes,dlwa\ns0,64,256,4.0\n");
    }
}
