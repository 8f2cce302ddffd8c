//! Log entry wire format.
//!
//! Every block starts with the same 24-byte little-endian header:
//!
//! ```text
//! 0  op        u8   (1 PUT, 2 DEL, 3 COMMITVER)
//! 1  flags     u8
//! 2  shard     u16
//! 4  version   u48
//! 10 checksum  u32  CRC-32C of the block with this field zeroed
//! 14 cnt       u16  blocks in the entry
//! 16 seq       u16  index of this block
//! 18 key_len   u16
//! 20 val_len   u32
//! ```
//!
//! The key and value are concatenated and split across blocks, at most
//! `mtu - 24` payload bytes per block. Each block is zero-padded to a
//! multiple of 64 bytes, so blocks never exceed the MTU.

use std::collections::BTreeMap;

use thiserror::Error;

pub const HEADER_LEN: usize = 24;
pub const BLOCK_ALIGN: usize = 64;
pub const MAX_VERSION: u64 = (1 << 48) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum OpType {
    Put = 1,
    Del = 2,
    CommitVer = 3,
}

impl OpType {
    pub fn from_u8(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Put),
            2 => Some(Self::Del),
            3 => Some(Self::CommitVer),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EntryError {
    #[error("key must be non-empty")]
    EmptyKey,
    #[error("key of {len} bytes exceeds limit {max}")]
    KeyTooLarge { len: usize, max: usize },
    #[error("value of {len} bytes exceeds limit {max}")]
    ValueTooLarge { len: usize, max: usize },
    #[error("version {0} does not fit in 48 bits")]
    Version(u64),
    #[error("mtu {0} must be a multiple of 64 and at least 128")]
    Mtu(usize),
    #[error("entry needs more than 65535 blocks")]
    TooManyBlocks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryLimits {
    pub max_key: usize,
    pub max_value: usize,
}

impl Default for EntryLimits {
    fn default() -> Self {
        Self {
            max_key: 256,
            max_value: 1 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LogEntry {
    pub op: OpType,
    pub flags: u8,
    pub shard: u16,
    pub version: u64,
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl LogEntry {
    pub fn put(shard: u16, version: u64, key: &[u8], value: &[u8]) -> Self {
        Self {
            op: OpType::Put,
            flags: 0,
            shard,
            version,
            key: key.to_vec(),
            value: value.to_vec(),
        }
    }

    pub fn del(shard: u16, version: u64, key: &[u8]) -> Self {
        Self {
            op: OpType::Del,
            flags: 0,
            shard,
            version,
            key: key.to_vec(),
            value: Vec::new(),
        }
    }

    pub fn commit_ver(shard: u16, version: u64) -> Self {
        Self {
            op: OpType::CommitVer,
            flags: 0,
            shard,
            version,
            key: Vec::new(),
            value: Vec::new(),
        }
    }

    pub fn encode(&self, mtu: usize, limits: &EntryLimits) -> Result<Vec<Vec<u8>>, EntryError> {
        encode_log_entry(self, mtu, limits)
    }

    /// Total encoded size in bytes.
    pub fn encoded_len(&self, mtu: usize) -> usize {
        let total = self.key.len() + self.value.len();
        let cap = mtu - HEADER_LEN;
        let cnt = total.div_ceil(cap).max(1);
        (0..cnt)
            .map(|i| {
                let chunk = (total - i * cap).min(cap);
                round_up(HEADER_LEN + chunk)
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub op: OpType,
    pub flags: u8,
    pub shard: u16,
    pub version: u64,
    pub checksum: u32,
    pub cnt: u16,
    pub seq: u16,
    pub key_len: u16,
    pub val_len: u32,
}

impl Header {
    pub fn parse(b: &[u8]) -> Option<Self> {
        if b.len() < HEADER_LEN {
            return None;
        }
        let op = OpType::from_u8(b[0])?;
        let mut v = [0u8; 8];
        v[..6].copy_from_slice(&b[4..10]);
        Some(Self {
            op,
            flags: b[1],
            shard: u16::from_le_bytes([b[2], b[3]]),
            version: u64::from_le_bytes(v),
            checksum: u32::from_le_bytes(b[10..14].try_into().ok()?),
            cnt: u16::from_le_bytes([b[14], b[15]]),
            seq: u16::from_le_bytes([b[16], b[17]]),
            key_len: u16::from_le_bytes([b[18], b[19]]),
            val_len: u32::from_le_bytes(b[20..24].try_into().ok()?),
        })
    }

    fn write(&self, out: &mut [u8]) {
        out[0] = self.op as u8;
        out[1] = self.flags;
        out[2..4].copy_from_slice(&self.shard.to_le_bytes());
        out[4..10].copy_from_slice(&self.version.to_le_bytes()[..6]);
        out[10..14].copy_from_slice(&self.checksum.to_le_bytes());
        out[14..16].copy_from_slice(&self.cnt.to_le_bytes());
        out[16..18].copy_from_slice(&self.seq.to_le_bytes());
        out[18..20].copy_from_slice(&self.key_len.to_le_bytes());
        out[20..24].copy_from_slice(&self.val_len.to_le_bytes());
    }

    pub fn payload_len(&self) -> usize {
        self.key_len as usize + self.val_len as usize
    }

    /// Payload bytes carried by this block, or `None` if the header is
    /// inconsistent with the MTU.
    pub fn chunk_len(&self, mtu: usize) -> Option<usize> {
        let cap = mtu - HEADER_LEN;
        let total = self.payload_len();
        let cnt = total.div_ceil(cap).max(1);
        if cnt != self.cnt as usize || self.seq >= self.cnt {
            return None;
        }
        Some((total - self.seq as usize * cap).min(cap))
    }

    pub fn block_len(&self, mtu: usize) -> Option<usize> {
        self.chunk_len(mtu).map(|c| round_up(HEADER_LEN + c))
    }
}

pub fn round_up(n: usize) -> usize {
    n.div_ceil(BLOCK_ALIGN) * BLOCK_ALIGN
}

fn block_crc(block: &[u8]) -> u32 {
    let c = crc32c::crc32c(&block[..10]);
    let c = crc32c::crc32c_append(c, &[0u8; 4]);
    crc32c::crc32c_append(c, &block[14..])
}

fn check_mtu(mtu: usize) -> Result<(), EntryError> {
    if mtu < 128 || mtu % BLOCK_ALIGN != 0 {
        return Err(EntryError::Mtu(mtu));
    }
    Ok(())
}

pub fn encode_log_entry(e: &LogEntry, mtu: usize, limits: &EntryLimits) -> Result<Vec<Vec<u8>>, EntryError> {
    check_mtu(mtu)?;
    if e.op != OpType::CommitVer && e.key.is_empty() {
        return Err(EntryError::EmptyKey);
    }
    let max_key = limits.max_key.min(mtu - HEADER_LEN).min(u16::MAX as usize);
    if e.key.len() > max_key {
        return Err(EntryError::KeyTooLarge {
            len: e.key.len(),
            max: max_key,
        });
    }
    if e.value.len() > limits.max_value || e.value.len() > u32::MAX as usize {
        return Err(EntryError::ValueTooLarge {
            len: e.value.len(),
            max: limits.max_value,
        });
    }
    if e.version > MAX_VERSION {
        return Err(EntryError::Version(e.version));
    }
    let cap = mtu - HEADER_LEN;
    let total = e.key.len() + e.value.len();
    let cnt = total.div_ceil(cap).max(1);
    if cnt > u16::MAX as usize {
        return Err(EntryError::TooManyBlocks);
    }
    let mut payload = Vec::with_capacity(total);
    payload.extend_from_slice(&e.key);
    payload.extend_from_slice(&e.value);
    let mut blocks = Vec::with_capacity(cnt);
    for seq in 0..cnt {
        let chunk = &payload[(seq * cap).min(total)..((seq + 1) * cap).min(total)];
        let mut b = vec![0u8; round_up(HEADER_LEN + chunk.len())];
        let mut h = Header {
            op: e.op,
            flags: e.flags,
            shard: e.shard,
            version: e.version,
            checksum: 0,
            cnt: cnt as u16,
            seq: seq as u16,
            key_len: e.key.len() as u16,
            val_len: e.value.len() as u32,
        };
        h.write(&mut b);
        b[HEADER_LEN..HEADER_LEN + chunk.len()].copy_from_slice(chunk);
        h.checksum = block_crc(&b);
        b[10..14].copy_from_slice(&h.checksum.to_le_bytes());
        blocks.push(b);
    }
    Ok(blocks)
}

/// Parses and verifies one block at the start of `bytes`.
pub fn parse_block(bytes: &[u8], mtu: usize) -> Option<(Header, usize)> {
    let h = Header::parse(bytes)?;
    let len = h.block_len(mtu)?;
    if len > bytes.len() || block_crc(&bytes[..len]) != h.checksum {
        return None;
    }
    Some((h, len))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedEntry {
    pub entry: LogEntry,
    /// Checksum of block 0; identifies the entry together with its version.
    pub checksum: u32,
    /// Address and length of each block, in `seq` order.
    pub blocks: Vec<(u64, usize)>,
}

impl DecodedEntry {
    pub fn addr(&self) -> u64 {
        self.blocks[0].0
    }

    pub fn encoded_len(&self) -> usize {
        self.blocks.iter().map(|b| b.1).sum()
    }

    pub fn is_contiguous(&self) -> bool {
        self.blocks.windows(2).all(|w| w[0].0 + w[0].1 as u64 == w[1].0)
    }
}

type GroupKey = (u16, u64, u8, u16, u16, u32);

#[derive(Debug, Clone, Default)]
pub struct PartialEntry {
    pub shard: u16,
    pub version: u64,
    pub cnt: u16,
    pub blocks: BTreeMap<u16, (u64, usize, Vec<u8>, u32)>,
}

/// Collects blocks of multi-block entries that may arrive out of order
/// and non-adjacent.
#[derive(Debug, Clone, Default)]
pub struct Reassembler {
    mtu: usize,
    groups: BTreeMap<GroupKey, PartialEntry>,
}

impl Reassembler {
    pub fn new(mtu: usize) -> Self {
        Self {
            mtu,
            groups: BTreeMap::new(),
        }
    }

    fn feed(&mut self, h: &Header, addr: u64, block: &[u8]) -> Option<DecodedEntry> {
        let chunk_len = h.chunk_len(self.mtu)?;
        let chunk = &block[HEADER_LEN..HEADER_LEN + chunk_len];
        if h.cnt == 1 {
            let (key, value) = chunk.split_at(h.key_len as usize);
            return Some(DecodedEntry {
                entry: LogEntry {
                    op: h.op,
                    flags: h.flags,
                    shard: h.shard,
                    version: h.version,
                    key: key.to_vec(),
                    value: value.to_vec(),
                },
                checksum: h.checksum,
                blocks: vec![(addr, block.len())],
            });
        }
        let gk = (h.shard, h.version, h.op as u8, h.cnt, h.key_len, h.val_len);
        let g = self.groups.entry(gk).or_insert_with(|| PartialEntry {
            shard: h.shard,
            version: h.version,
            cnt: h.cnt,
            blocks: BTreeMap::new(),
        });
        g.blocks
            .entry(h.seq)
            .or_insert_with(|| (addr, block.len(), chunk.to_vec(), h.checksum));
        if g.blocks.len() < h.cnt as usize {
            return None;
        }
        let g = self.groups.remove(&gk).expect("present");
        let mut payload = Vec::with_capacity(h.payload_len());
        let mut blocks = Vec::with_capacity(g.blocks.len());
        let mut checksum = 0;
        for (seq, (a, len, c, crc)) in g.blocks {
            if seq == 0 {
                checksum = crc;
            }
            payload.extend_from_slice(&c);
            blocks.push((a, len));
        }
        let value = payload.split_off(h.key_len as usize);
        Some(DecodedEntry {
            entry: LogEntry {
                op: h.op,
                flags: h.flags,
                shard: h.shard,
                version: h.version,
                key: payload,
                value,
            },
            checksum,
            blocks,
        })
    }

    /// Scans a region laid out at absolute address `base`. Stops at the
    /// first zero op byte or invalid block; returns entries completed in
    /// this region and the end offset relative to `bytes`.
    pub fn scan(&mut self, bytes: &[u8], base: u64) -> (Vec<DecodedEntry>, usize) {
        self.scan_with(bytes, base, &mut |_, _| {})
    }

    /// Like [`Reassembler::scan`], also reporting every valid block header.
    pub fn scan_with(
        &mut self,
        bytes: &[u8],
        base: u64,
        on_block: &mut dyn FnMut(u64, &Header),
    ) -> (Vec<DecodedEntry>, usize) {
        let mut out = Vec::new();
        let mut pos = 0;
        while pos + HEADER_LEN <= bytes.len() {
            let Some((h, len)) = parse_block(&bytes[pos..], self.mtu) else {
                break;
            };
            on_block(base + pos as u64, &h);
            if let Some(e) = self.feed(&h, base + pos as u64, &bytes[pos..pos + len]) {
                out.push(e);
            }
            pos += len;
        }
        (out, pos)
    }

    pub fn incomplete(&self) -> impl Iterator<Item = &PartialEntry> {
        self.groups.values()
    }
}

#[derive(Debug, Clone)]
pub struct ScanResult {
    pub entries: Vec<DecodedEntry>,
    pub incomplete: Vec<PartialEntry>,
    pub end: usize,
}

pub fn decode_scan(bytes: &[u8], mtu: usize) -> ScanResult {
    let mut r = Reassembler::new(mtu);
    let (entries, end) = r.scan(bytes, 0);
    ScanResult {
        entries,
        incomplete: r.groups.into_values().collect(),
        end,
    }
}
