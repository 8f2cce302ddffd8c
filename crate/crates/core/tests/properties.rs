use std::collections::{BTreeSet, HashMap};

use proptest::prelude::*;

use rowankv::bench::workload::{gen_workload, Op, SizeModel, WorkloadSpec};
use rowankv::bench::experiment::{csv_rows, write_csv, ExperimentResult};
use rowankv::bench::{run_experiment, ExperimentSpec, KeyDistribution};
use rowankv::cluster::{ClusterConfig, Configuration};
use rowankv::fabric::{CqMode, Fabric, FabricConfig, NodeId, QpKind, SrqKind, WorkRequest};
use rowankv::kv::entry::{decode_scan, LogEntry, BLOCK_ALIGN};
use rowankv::kv::index::{key_hash, ShardIndex};
use rowankv::kv::replication::{BatchAction, BatchBuffer, LogRegion, BATCH_THRESHOLD};
use rowankv::kv::EntryLimits;
use rowankv::pm::{PmConfig, PmDevice, XPLINE_SIZE};

fn entry_strategy() -> impl Strategy<Value = LogEntry> {
    (
        any::<u16>(),
        1u64..(1 << 48),
        prop::collection::vec(any::<u8>(), 1..48),
        prop::collection::vec(any::<u8>(), 0..3000),
        any::<bool>(),
    )
        .prop_map(|(shard, version, key, value, del)| {
            if del {
                LogEntry::del(shard, version, &key)
            } else {
                LogEntry::put(shard, version, &key, &value)
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn entries_round_trip(entries in prop::collection::vec(entry_strategy(), 1..6), mtu in prop::sample::select(vec![256usize, 1024]), pick in prop::collection::vec(any::<prop::sample::Index>(), 64)) {
        let limits = EntryLimits::default();
        let mut streams: Vec<Vec<Vec<u8>>> = entries.iter().map(|e| e.encode(mtu, &limits).unwrap()).collect();
        for blocks in &streams {
            for b in blocks {
                prop_assert_eq!(b.len() % BLOCK_ALIGN, 0);
                prop_assert!(b.len() <= mtu);
                prop_assert!(b[..8].iter().any(|&x| x != 0));
            }
        }
        // Interleave blocks of different entries, keeping each entry's order.
        let mut log = Vec::new();
        let mut i = 0;
        while streams.iter().any(|s| !s.is_empty()) {
            let live: Vec<usize> = (0..streams.len()).filter(|&k| !streams[k].is_empty()).collect();
            let k = live[pick[i % pick.len()].index(live.len())];
            i += 1;
            log.extend(streams[k].remove(0));
        }
        let scan = decode_scan(&log, mtu);
        prop_assert_eq!(scan.end, log.len());
        prop_assert!(scan.incomplete.is_empty());
        let mut got: Vec<LogEntry> = scan.entries.into_iter().map(|d| d.entry).collect();
        let mut want = entries.clone();
        got.sort_by(|a, b| (a.version, &a.key).cmp(&(b.version, &b.key)));
        want.sort_by(|a, b| (a.version, &a.key).cmp(&(b.version, &b.key)));
        prop_assert_eq!(got, want);
    }

    #[test]
    fn index_keeps_highest_version(ops in prop::collection::vec((0u8..12, 1u64..20), 1..200)) {
        let mut idx = ShardIndex::new(2);
        // addr -> (key, version), the log the index points into.
        let mut log: HashMap<u64, (Vec<u8>, u64)> = HashMap::new();
        let mut best: HashMap<Vec<u8>, u64> = HashMap::new();
        for (n, (k, v)) in ops.into_iter().enumerate() {
            let key = format!("k{k}").into_bytes();
            let addr = 64 * (n as u64 + 1);
            log.insert(addr, (key.clone(), v));
            let probe = |a: u64, key: &[u8]| log.get(&a).filter(|(k, _)| k == key).map(|e| e.1);
            let installed = idx.upsert(&key, key_hash(&key), v, addr, &probe);
            let prev = best.get(&key).copied();
            prop_assert_eq!(installed, prev.is_none_or(|p| v > p));
            if installed {
                best.insert(key, v);
            }
        }
        let probe = |a: u64, key: &[u8]| log.get(&a).filter(|(k, _)| k == key).map(|e| e.1);
        prop_assert_eq!(idx.len(), best.len());
        for (key, v) in &best {
            prop_assert_eq!(idx.get(key, key_hash(key), &probe).map(|x| x.1), Some(*v));
        }
    }

    #[test]
    fn pm_reads_reflect_writes(writes in prop::collection::vec(((0u64..1024).prop_map(|a| a * 8), prop::collection::vec(any::<u8>(), 1..300)), 1..200), cap in 1usize..8) {
        let mut pm = PmDevice::new(PmConfig { xpbuffer_capacity: cap, ..PmConfig::with_capacity(8192 + 512) });
        let mut shadow = vec![0u8; 8192 + 512];
        let mut req = 0u64;
        for (addr, data) in &writes {
            pm.write(*addr, data).unwrap();
            shadow[*addr as usize..*addr as usize + data.len()].copy_from_slice(data);
            req += data.len() as u64;
            prop_assert!(pm.buffered_lines() <= cap);
        }
        prop_assert_eq!(pm.read(0, shadow.len()).unwrap(), shadow.clone());
        pm.flush_all();
        prop_assert_eq!(pm.buffered_lines(), 0);
        prop_assert_eq!(pm.read(0, shadow.len()).unwrap(), shadow);
        let c = pm.counters();
        prop_assert_eq!(c.request_bytes, req);
        prop_assert_eq!(c.media_bytes % XPLINE_SIZE, 0);
        // Every touched line is written back at least once.
        let lines: BTreeSet<u64> = writes
            .iter()
            .flat_map(|(a, d)| (a / XPLINE_SIZE)..=((a + d.len() as u64 - 1) / XPLINE_SIZE))
            .collect();
        prop_assert!(c.media_bytes >= lines.len() as u64 * XPLINE_SIZE);
    }

    #[test]
    fn mp_srq_placements_are_disjoint(msgs in prop::collection::vec((0usize..4, 1usize..2500), 1..40), seed in any::<u64>()) {
        let mut f = Fabric::new(FabricConfig { jitter: 2_000, seed, ..FabricConfig::default() });
        let rx = f.add_node(PmConfig::with_capacity(1 << 20));
        let cq = f.create_cq(CqMode::Fifo { capacity: None });
        let srq = f.create_srq(rx, SrqKind::MultiPacket { stride: 64 }, cq).unwrap();
        let qps: Vec<_> = (0..4)
            .map(|_| {
                let tx = f.add_node(PmConfig::with_capacity(4096));
                let tcq = f.create_cq(CqMode::Fifo { capacity: None });
                f.connect(QpKind::ReliableConnected, tx, tcq, None, rx, cq, Some(srq)).unwrap().0
            })
            .collect();
        let bufs: Vec<u64> = (0..32).map(|i| i * 16384).collect();
        for &b in &bufs {
            f.post_recv(srq, b, 8192).unwrap();
        }
        for (i, (s, len)) in msgs.iter().enumerate() {
            f.post_send(qps[*s], vec![WorkRequest::send(i as u64, vec![i as u8 | 1; *len], false)], 0).unwrap();
        }
        let recvs: Vec<_> = f.deliver_step(u64::MAX / 2).into_iter().filter(|c| c.cq == cq).collect();
        prop_assert_eq!(recvs.len(), msgs.len());
        let mut spans = Vec::new();
        for c in &recvs {
            for p in &c.placement {
                let base = bufs.iter().rev().find(|&&b| b <= p.addr).copied().unwrap();
                prop_assert_eq!((p.addr - base) % 64, 0);
                prop_assert!(p.addr + p.len as u64 <= base + 8192);
                spans.push((p.addr, p.addr + (p.len as u64).div_ceil(64) * 64));
            }
        }
        spans.sort_unstable();
        prop_assert!(spans.windows(2).all(|w| w[0].1 <= w[1].0));
        let consumed = &f.srq(srq).consumed;
        prop_assert_eq!(&consumed[..], &bufs[..consumed.len()]);
        // Landed bytes are intact.
        for c in &recvs {
            let total: usize = c.placement.iter().map(|p| p.len as usize).sum();
            prop_assert_eq!(total, c.byte_len as usize);
            let first = f.pm(NodeId(0)).read(c.placement[0].addr, 1).unwrap()[0];
            prop_assert!(first & 1 == 1);
        }
    }

    #[test]
    fn batches_preserve_entry_stream(entries in prop::collection::vec((64usize..200, 0u64..8_000), 1..100)) {
        let mut b = BatchBuffer::default();
        let mut now = 0;
        let mut timer: Option<(u64, u64)> = None;
        let mut sent: Vec<u8> = Vec::new();
        let mut flushed: Vec<u8> = Vec::new();
        let flush = |batch: rowankv::kv::replication::Batch, by_timer: bool, out: &mut Vec<u8>| {
            if by_timer {
                assert!(batch.bytes.len() < BATCH_THRESHOLD);
            } else {
                assert!(batch.bytes.len() >= BATCH_THRESHOLD);
            }
            out.extend(batch.bytes);
        };
        for (i, (len, gap)) in entries.iter().enumerate() {
            now += gap;
            if let Some((deadline, generation)) = timer {
                if deadline <= now {
                    if let Some(batch) = b.expire(generation) {
                        flush(batch, true, &mut flushed);
                    }
                    timer = None;
                }
            }
            let e = vec![i as u8; *len];
            sent.extend(&e);
            match b.push(i as u64, &e, now) {
                BatchAction::Flush(batch) => flush(batch, false, &mut flushed),
                BatchAction::Arm { deadline, generation } => timer = Some((deadline, generation)),
                BatchAction::Wait => {}
            }
        }
        if let Some((_, generation)) = timer {
            if let Some(batch) = b.expire(generation) {
                flush(batch, true, &mut flushed);
            }
        }
        prop_assert_eq!(b.pending_bytes(), 0);
        prop_assert_eq!(flushed, sent);
    }

    #[test]
    fn log_region_stays_inside(sizes in prop::collection::vec(1u64..512, 1..300)) {
        let mut r = LogRegion::new(4096, 2048);
        for n in sizes {
            let at = r.reserve(n);
            prop_assert!(at >= 4096 && at + n <= 4096 + 2048);
        }
    }

    #[test]
    fn failover_and_restore_keep_placement_valid(servers in 3u32..9, shards in 1u16..40, k in 2usize..4, dead_mask in any::<u16>()) {
        let c = Configuration::initial(servers, shards, k);
        c.validate(k).unwrap();
        let dead: BTreeSet<u32> = (0..servers).filter(|s| dead_mask & (1 << s) != 0).take(k - 1).collect();
        let (f, promoted) = c.without(&dead);
        prop_assert!(f.term > c.term);
        for p in &f.shards {
            prop_assert!(!dead.contains(&p.primary));
            prop_assert!(p.backups.iter().all(|b| !dead.contains(b)));
        }
        for (s, p) in promoted {
            prop_assert!(c.placement(s).backups.contains(&p));
        }
        let (r, _) = f.with_backups_restored(k);
        r.validate(k).unwrap();
        prop_assert!(!r.under_replicated(k));
        // Surviving primaries never move during restoration.
        for (a, b) in f.shards.iter().zip(&r.shards) {
            prop_assert_eq!(a.primary, b.primary);
        }
    }
}

#[test]
fn put_ratio_is_respected() {
    for ratio in [0.05, 0.5, 0.95] {
        let spec = WorkloadSpec {
            put_ratio: ratio,
            ..WorkloadSpec::default()
        };
        let reqs = gen_workload(spec, 100_000).unwrap();
        let puts = reqs.iter().filter(|r| r.op == Op::Put).count() as f64 / reqs.len() as f64;
        assert!((puts - ratio).abs() < 0.01, "{ratio}: {puts}");
    }
}

fn csv_bytes(r: &ExperimentResult) -> Vec<u8> {
    let mut out = Vec::new();
    write_csv(&csv_rows(r), &mut out).unwrap();
    out
}

#[test]
fn experiments_are_deterministic() {
    let cfg = ClusterConfig {
        clients: 24,
        ..ClusterConfig::default()
    };
    let spec = ExperimentSpec {
        workload: WorkloadSpec {
            put_ratio: 0.5,
            key_count: 2_000,
            distribution: KeyDistribution::Zipfian { theta: 0.99 },
            size: SizeModel::ZippyDb,
            seed: 7,
        },
        populate: 2_000,
        warmup: 1_000,
        ops: 5_000,
        ..ExperimentSpec::default()
    };
    for s in rowankv::kv::Strategy::ALL {
        let a = csv_bytes(&run_experiment(&cfg, &spec, s).unwrap());
        let b = csv_bytes(&run_experiment(&cfg, &spec, s).unwrap());
        assert_eq!(a, b, "{s}");
    }
}
