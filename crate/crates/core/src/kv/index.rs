//! DRAM bucket hash index. Each item is a 64-bit word: a 16-bit tag from
//! the key hash and the 48-bit PM address of the newest log entry.

pub const ADDR_BITS: u32 = 48;
pub const ADDR_MASK: u64 = (1 << ADDR_BITS) - 1;
const SLOTS: usize = 7;

/// Stable 64-bit key hash, identical on every server.
pub fn key_hash(key: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in key {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finalizer spreads FNV's weak high bits.
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

pub fn tag_of(hash: u64) -> u16 {
    (hash >> 32) as u16
}

/// Shards own contiguous ranges of the hash space.
pub fn shard_of(hash: u64, shards: u16) -> u16 {
    ((hash as u128 * shards as u128) >> 64) as u16
}

/// Resolves an indexed address back to the entry it names.
pub trait EntryProbe {
    /// Version of the entry at `addr` if its key equals `key`.
    fn probe(&self, addr: u64, key: &[u8]) -> Option<u64>;
}

impl<F: Fn(u64, &[u8]) -> Option<u64>> EntryProbe for F {
    fn probe(&self, addr: u64, key: &[u8]) -> Option<u64> {
        self(addr, key)
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Bucket {
    items: [u64; SLOTS],
    /// 1-based index into the overflow arena, 0 for none.
    next: u32,
}

fn item(tag: u16, addr: u64) -> u64 {
    debug_assert!(addr != 0 && addr <= ADDR_MASK);
    ((tag as u64) << ADDR_BITS) | addr
}

fn item_tag(it: u64) -> u16 {
    (it >> ADDR_BITS) as u16
}

pub fn item_addr(it: u64) -> u64 {
    it & ADDR_MASK
}

#[derive(Debug, Clone)]
pub struct ShardIndex {
    heads: Vec<Bucket>,
    overflow: Vec<Bucket>,
    len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Head(usize, usize),
    Overflow(usize, usize),
}

impl ShardIndex {
    pub fn new(buckets: usize) -> Self {
        Self {
            heads: vec![Bucket::default(); buckets.max(1)],
            overflow: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn overflow_buckets(&self) -> usize {
        self.overflow.len()
    }

    fn get_slot(&self, s: Slot) -> u64 {
        match s {
            Slot::Head(b, i) => self.heads[b].items[i],
            Slot::Overflow(b, i) => self.overflow[b].items[i],
        }
    }

    fn set_slot(&mut self, s: Slot, v: u64) {
        match s {
            Slot::Head(b, i) => self.heads[b].items[i] = v,
            Slot::Overflow(b, i) => self.overflow[b].items[i] = v,
        }
    }

    /// Walks the chain of `hash`'s bucket; returns the matching slot and
    /// version, plus the first empty slot seen.
    fn find(&self, key: &[u8], hash: u64, probe: &dyn EntryProbe) -> (Option<(Slot, u64)>, Option<Slot>) {
        let tag = tag_of(hash);
        let head = (hash % self.heads.len() as u64) as usize;
        let mut empty = None;
        let mut bucket = &self.heads[head];
        let mut at = None;
        loop {
            for (i, &it) in bucket.items.iter().enumerate() {
                let slot = match at {
                    None => Slot::Head(head, i),
                    Some(o) => Slot::Overflow(o, i),
                };
                if it == 0 {
                    empty.get_or_insert(slot);
                } else if item_tag(it) == tag {
                    if let Some(v) = probe.probe(item_addr(it), key) {
                        return (Some((slot, v)), empty);
                    }
                }
            }
            if bucket.next == 0 {
                return (None, empty);
            }
            let o = bucket.next as usize - 1;
            at = Some(o);
            bucket = &self.overflow[o];
        }
    }

    fn tail_of(&self, head: usize) -> Option<usize> {
        let mut next = self.heads[head].next;
        let mut last = None;
        while next != 0 {
            last = Some(next as usize - 1);
            next = self.overflow[next as usize - 1].next;
        }
        last
    }

    /// Address and version of `key`'s indexed entry.
    pub fn get(&self, key: &[u8], hash: u64, probe: &dyn EntryProbe) -> Option<(u64, u64)> {
        self.find(key, hash, probe)
            .0
            .map(|(s, v)| (item_addr(self.get_slot(s)), v))
    }

    /// Installs `addr` iff `version` is strictly greater than the indexed one.
    pub fn upsert(&mut self, key: &[u8], hash: u64, version: u64, addr: u64, probe: &dyn EntryProbe) -> bool {
        let tag = tag_of(hash);
        match self.find(key, hash, probe) {
            (Some((slot, v)), _) => {
                if version > v {
                    self.set_slot(slot, item(tag, addr));
                    true
                } else {
                    false
                }
            }
            (None, Some(slot)) => {
                self.set_slot(slot, item(tag, addr));
                self.len += 1;
                true
            }
            (None, None) => {
                let head = (hash % self.heads.len() as u64) as usize;
                let mut b = Bucket::default();
                b.items[0] = item(tag, addr);
                self.overflow.push(b);
                let idx = self.overflow.len() as u32;
                match self.tail_of(head) {
                    None => self.heads[head].next = idx,
                    Some(t) => self.overflow[t].next = idx,
                }
                self.len += 1;
                true
            }
        }
    }

    /// Points an existing item at a relocated copy of the same entry.
    pub fn relocate(&mut self, key: &[u8], hash: u64, old: u64, new: u64, probe: &dyn EntryProbe) -> bool {
        match self.find(key, hash, probe).0 {
            Some((slot, _)) if item_addr(self.get_slot(slot)) == old => {
                self.set_slot(slot, item(tag_of(hash), new));
                true
            }
            _ => false,
        }
    }

    pub fn remove(&mut self, key: &[u8], hash: u64, probe: &dyn EntryProbe) -> bool {
        match self.find(key, hash, probe).0 {
            Some((slot, _)) => {
                self.set_slot(slot, 0);
                self.len -= 1;
                true
            }
            None => false,
        }
    }

    /// Every indexed address.
    pub fn addrs(&self) -> Vec<u64> {
        self.heads
            .iter()
            .chain(self.overflow.iter())
            .flat_map(|b| b.items.iter().copied())
            .filter(|&it| it != 0)
            .map(item_addr)
            .collect()
    }

    pub fn clear(&mut self) {
        let n = self.heads.len();
        *self = Self::new(n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Fake PM: address -> (key, version).
    struct Store(HashMap<u64, (Vec<u8>, u64)>);

    impl EntryProbe for Store {
        fn probe(&self, addr: u64, key: &[u8]) -> Option<u64> {
            self.0.get(&addr).filter(|(k, _)| k == key).map(|(_, v)| *v)
        }
    }

    #[test]
    fn strict_version_rule() {
        let mut s = Store(HashMap::new());
        let mut idx = ShardIndex::new(16);
        let k = b"key";
        let h = key_hash(k);
        s.0.insert(64, (k.to_vec(), 5));
        assert!(idx.upsert(k, h, 5, 64, &s));
        s.0.insert(128, (k.to_vec(), 3));
        assert!(!idx.upsert(k, h, 3, 128, &s));
        s.0.insert(192, (k.to_vec(), 5));
        assert!(!idx.upsert(k, h, 5, 192, &s));
        assert_eq!(idx.get(k, h, &s), Some((64, 5)));
        assert_eq!(idx.len(), 1);
    }

    #[test]
    fn both_orders_end_at_highest_version() {
        for order in [[7u64, 8], [8, 7]] {
            let mut s = Store(HashMap::new());
            let mut idx = ShardIndex::new(4);
            let k = b"k";
            for v in order {
                s.0.insert(v * 64, (k.to_vec(), v));
                idx.upsert(k, key_hash(k), v, v * 64, &s);
            }
            assert_eq!(idx.get(k, key_hash(k), &s), Some((8 * 64, 8)));
        }
    }

    #[test]
    fn tag_collision_resolved_by_key() {
        // Search for two keys with the same tag and bucket.
        let a = b"seed".to_vec();
        let ha = key_hash(&a);
        let b = (0u64..)
            .map(|i| format!("k{i}").into_bytes())
            .find(|k| {
                let h = key_hash(k);
                tag_of(h) == tag_of(ha) && h % 2 == ha % 2 && *k != a
            })
            .unwrap();
        let hb = key_hash(&b);
        let mut s = Store(HashMap::new());
        s.0.insert(64, (a.clone(), 1));
        s.0.insert(128, (b.clone(), 2));
        let mut idx = ShardIndex::new(2);
        idx.upsert(&a, ha, 1, 64, &s);
        idx.upsert(&b, hb, 2, 128, &s);
        assert_eq!(idx.get(&a, ha, &s), Some((64, 1)));
        assert_eq!(idx.get(&b, hb, &s), Some((128, 2)));
    }

    #[test]
    fn overflow_chains_grow() {
        let mut s = Store(HashMap::new());
        let mut idx = ShardIndex::new(1);
        for i in 0..50u64 {
            let k = format!("key{i}").into_bytes();
            s.0.insert((i + 1) * 64, (k.clone(), 1));
            assert!(idx.upsert(&k, key_hash(&k), 1, (i + 1) * 64, &s));
        }
        assert_eq!(idx.len(), 50);
        assert!(idx.overflow_buckets() >= 6);
        for i in 0..50u64 {
            let k = format!("key{i}").into_bytes();
            assert_eq!(idx.get(&k, key_hash(&k), &s), Some(((i + 1) * 64, 1)));
        }
        let k = b"key3";
        assert!(idx.remove(k, key_hash(k), &s));
        assert_eq!(idx.get(k, key_hash(k), &s), None);
        assert_eq!(idx.addrs().len(), 49);
    }

    #[test]
    fn relocate_only_matching_address() {
        let mut s = Store(HashMap::new());
        let mut idx = ShardIndex::new(8);
        let k = b"x";
        let h = key_hash(k);
        s.0.insert(64, (k.to_vec(), 4));
        idx.upsert(k, h, 4, 64, &s);
        s.0.insert(4096, (k.to_vec(), 4));
        assert!(!idx.relocate(k, h, 128, 4096, &s));
        assert!(idx.relocate(k, h, 64, 4096, &s));
        assert_eq!(idx.get(k, h, &s), Some((4096, 4)));
    }

    #[test]
    fn shard_ranges_are_contiguous() {
        assert_eq!(shard_of(0, 8), 0);
        assert_eq!(shard_of(u64::MAX, 8), 7);
        assert_eq!(shard_of(1 << 61, 8), 1);
    }
}
