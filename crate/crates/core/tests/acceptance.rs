//! Acceptance criteria 1-10. Runs as a plain binary and prints one
//! PASS/FAIL line per criterion.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rowankv::bench::workload::{key_name, Populate};
use rowankv::bench::{dlwa_sweep, run_experiment, stream_dlwa, ExperimentSpec, KeyDistribution, SizeModel, WorkloadSpec};
use rowankv::cluster::{ClientOp, Cluster, ClusterConfig, ClusterStats, Migration, Observed, OpKind};
use rowankv::fabric::{CqMode, Fabric, FabricConfig, QpId, QpKind, SrqKind, WorkRequest};
use rowankv::kv::Strategy;
use rowankv::pm::PmConfig;
use rowankv::{NS_PER_MS, NS_PER_US};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Commit checks and violations accumulated across every cluster run.
#[derive(Default)]
struct Safety {
    runs: usize,
    commits_checked: u64,
    violations: Vec<String>,
}

impl Safety {
    fn absorb(&mut self, st: &ClusterStats) {
        self.runs += 1;
        self.commits_checked += st.commits_checked;
        self.violations.extend(st.commit_violations.iter().cloned());
    }
}

// ---- 1. DLWA endpoints

fn pm_sweep() -> Verdict {
    let t = Instant::now();
    let single = stream_dlwa(1, 1 << 20, 64, 64).unwrap().dlwa;
    let pts = dlwa_sweep(&[1, 32, 64, 96, 128], 4 << 20, 64, 64).unwrap();
    let d: Vec<f64> = pts.iter().map(|p| p.dlwa).collect();
    let monotone = d.windows(2).all(|w| w[1] >= w[0]);
    let el = t.elapsed();
    verdict(
        single <= 1.01 && d[4] >= 3.9 && monotone && el < Duration::from_secs(5),
        format!("single {single:.4}, sweep {d:.3?}, {:.2}s", el.as_secs_f64()),
    )
}

// ---- 2 and 3. Cluster DLWA

fn write_only_spec(seed: u64) -> ExperimentSpec {
    ExperimentSpec {
        workload: WorkloadSpec {
            put_ratio: 1.0,
            key_count: 100_000,
            distribution: KeyDistribution::Uniform,
            size: SizeModel::Fixed(48),
            seed,
        },
        populate: 0,
        warmup: 20_000,
        ops: 100_000,
        time_limit: 1_000 * NS_PER_MS,
    }
}

fn rowan_bound() -> Verdict {
    let t = Instant::now();
    let r = run_experiment(&ClusterConfig::six_by_24(Strategy::Rowan), &write_only_spec(1), Strategy::Rowan).unwrap();
    let el = t.elapsed();
    let per: Vec<f64> = r.servers.iter().map(|s| s.dlwa).collect();
    verdict(
        per.len() == 6 && r.max_dlwa() <= 1.05 && el < Duration::from_secs(60),
        format!("per-server {per:.3?}, {:.1}s", el.as_secs_f64()),
    )
}

fn ordering() -> Verdict {
    let cfg = ClusterConfig::six_by_24(Strategy::Rowan);
    let spec = write_only_spec(1);
    let mut d = BTreeMap::new();
    let mut blogs = 0;
    for s in [Strategy::Rowan, Strategy::Batch, Strategy::Share, Strategy::Write] {
        let r = run_experiment(&cfg, &spec, s).unwrap();
        if s == Strategy::Write {
            blogs = r.blogs_per_server;
        }
        d.insert(s.name(), r.dlwa());
    }
    let (ro, ba, sh, wr) = (d["ROWAN"], d["BATCH"], d["SHARE"], d["WRITE"]);
    let reference = 1.54;
    verdict(
        ro < ba && ba < sh && sh < wr && wr >= 1.3 && (wr - reference).abs() <= 0.3 * reference && blogs >= 120,
        format!("ROWAN {ro:.3} < BATCH {ba:.3} < SHARE {sh:.3} < WRITE {wr:.3}, {blogs} b-logs per server"),
    )
}

// ---- 4, 5, 6. Failover under random crashes

fn mixed(seed: u64, keys: u64, get_ratio: f64) -> impl FnMut(usize, u64) -> Option<ClientOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    move |_, _| {
        let key = key_name(rng.random_range(0..keys));
        let kind = if rng.random_bool(get_ratio) {
            OpKind::Get
        } else if rng.random_bool(0.05) {
            OpKind::Del
        } else {
            OpKind::Put {
                value_len: 24 + rng.random_range(0..120),
            }
        };
        Some(ClientOp { kind, key })
    }
}

struct CrashRuns {
    seeds: usize,
    durability: Vec<String>,
    replica_sets: usize,
    unequal: Vec<String>,
    no_phase2: Vec<u64>,
}

fn crash_runs(safety: &mut Safety) -> CrashRuns {
    let mut out = CrashRuns {
        seeds: 0,
        durability: Vec::new(),
        replica_sets: 0,
        unequal: Vec::new(),
        no_phase2: Vec::new(),
    };
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0ffee ^ seed);
        let mut cfg = ClusterConfig {
            servers: 3 + (seed % 2) as u32,
            ..ClusterConfig::default()
        };
        cfg.fabric.seed = seed;
        cfg.fabric.jitter = 500;
        let mut c = Cluster::new(cfg, Box::new(mixed(seed, 400, 0.3))).unwrap();
        c.start_clients();
        c.run_for(rng.random_range(1..6) * NS_PER_MS);
        // Crash at an arbitrary event boundary, not at a round time.
        for _ in 0..rng.random_range(0..3000) {
            c.step();
        }
        c.crash(rng.random_range(0..cfg.servers));
        c.run_for(30 * NS_PER_MS);
        c.stop_clients();
        c.run_for(c.config().timing.client_timeout);
        c.verify_acked();
        out.durability.extend(c.oracle().violations().iter().map(|v| format!("seed {seed}: {v}")));
        let st = c.stats();
        if st.replica_checks.is_empty() {
            out.no_phase2.push(seed);
        }
        for r in &st.replica_checks {
            out.replica_sets += 1;
            if !r.equal {
                out.unequal.push(format!("seed {seed} shard {}", r.shard));
            }
        }
        safety.absorb(st);
        out.seeds += 1;
    }
    out
}

// ---- 7. MP SRQ placement law

const STRIDE: u64 = 64;
const MTU: usize = 256;

/// Independent placement oracle: buffers in post order, each packet at the
/// next stride boundary, a new buffer when the packet does not fit.
fn oracle_place(buffers: &[(u64, u64)], packets: &[usize]) -> Vec<u64> {
    let mut out = Vec::new();
    let mut next = 0usize;
    let mut active: Option<(u64, u64, u64)> = None;
    for &len in packets {
        let need = (len as u64).div_ceil(STRIDE) * STRIDE;
        match active {
            Some((base, blen, off)) if off + need <= blen => {
                out.push(base + off);
                active = Some((base, blen, off + need));
            }
            _ => {
                let (base, blen) = buffers[next];
                next += 1;
                assert!(need <= blen);
                out.push(base);
                active = Some((base, blen, need));
            }
        }
    }
    out
}

fn fragments(len: usize) -> Vec<usize> {
    let mut v = vec![MTU; len / MTU];
    if len % MTU != 0 || len == 0 {
        v.push(len % MTU);
    }
    v
}

struct Rig {
    f: Fabric,
    qps: Vec<QpId>,
    srq: rowankv::fabric::SrqId,
    cq: rowankv::fabric::CqId,
    buffers: Vec<(u64, u64)>,
}

fn rig(senders: usize, seed: u64, jitter: u64) -> Rig {
    let mut f = Fabric::new(FabricConfig {
        mtu: MTU as u32,
        jitter,
        seed,
        ..FabricConfig::default()
    });
    let rx = f.add_node(PmConfig::with_capacity(1 << 20));
    let cq = f.create_cq(CqMode::Fifo { capacity: None });
    let srq = f.create_srq(rx, SrqKind::MultiPacket { stride: STRIDE as u32 }, cq).unwrap();
    let mut qps = Vec::new();
    for _ in 0..senders {
        let tx = f.add_node(PmConfig::with_capacity(4096));
        let tcq = f.create_cq(CqMode::Fifo { capacity: None });
        let (q, _) = f.connect(QpKind::ReliableConnected, tx, tcq, None, rx, cq, Some(srq)).unwrap();
        qps.push(q);
    }
    // Unequal, non-contiguous buffers so that buffer switches happen often.
    let buffers: Vec<(u64, u64)> = (0..64u64).map(|i| (i * 8192 + 4096, 256 + (i % 3) * 128)).collect();
    for &(b, l) in &buffers {
        f.post_recv(srq, b, l).unwrap();
    }
    Rig { f, qps, srq, cq, buffers }
}

/// Checks the laws on the receive completions of one run; `order` is the
/// packet lengths in arrival order.
fn check_run(r: &mut Rig, order: &[usize], placed: &[u64]) -> Result<(), String> {
    let expect = oracle_place(&r.buffers, order);
    if placed != expect {
        return Err(format!("placed {placed:?}, oracle {expect:?}"));
    }
    let mut spans: Vec<(u64, u64)> = Vec::new();
    for (&a, &len) in placed.iter().zip(order) {
        let &(base, blen) = r.buffers.iter().find(|(b, l)| a >= *b && a < b + l).ok_or("outside buffers")?;
        let need = (len as u64).div_ceil(STRIDE) * STRIDE;
        if (a - base) % STRIDE != 0 || a + need > base + blen {
            return Err(format!("misaligned or overflowing placement at {a}"));
        }
        spans.push((a, a + need));
    }
    spans.sort_unstable();
    if spans.windows(2).any(|w| w[0].1 > w[1].0) {
        return Err("overlapping placements".into());
    }
    let consumed = &r.f.srq(r.srq).consumed;
    let posted: Vec<u64> = r.buffers.iter().map(|b| b.0).collect();
    if consumed[..] != posted[..consumed.len()] {
        return Err("buffers consumed out of post order".into());
    }
    Ok(())
}

/// Every interleaving of the senders' packet streams.
fn interleavings(counts: &mut Vec<usize>, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    if counts.iter().all(|&c| c == 0) {
        out.push(prefix.clone());
        return;
    }
    for s in 0..counts.len() {
        if counts[s] > 0 {
            counts[s] -= 1;
            prefix.push(s);
            interleavings(counts, prefix, out);
            prefix.pop();
            counts[s] += 1;
        }
    }
}

fn placement_law() -> Verdict {
    let sizes = [1usize, 63, 64, 65, 128, 200, 256, 300];
    let mut cases = 0u64;
    // Exhaustive: every interleaving of up to 6 packets over up to 4 senders.
    for senders in 1..=4usize {
        for total in senders..=6 {
            for variant in 0..6u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(variant * 31 + total as u64 * 7 + senders as u64);
                let mut msgs: Vec<Vec<usize>> = vec![Vec::new(); senders];
                let mut pkts = vec![0usize; senders];
                let mut budget = total;
                for s in 0..senders {
                    let len = sizes[rng.random_range(0..sizes.len())];
                    msgs[s].push(len);
                    pkts[s] += fragments(len).len();
                    budget = budget.saturating_sub(1);
                }
                while budget > 0 {
                    let s = rng.random_range(0..senders);
                    let len = sizes[rng.random_range(0..sizes.len())];
                    msgs[s].push(len);
                    pkts[s] += fragments(len).len();
                    budget -= 1;
                }
                if pkts.iter().sum::<usize>() > 6 {
                    continue;
                }
                let mut orders = Vec::new();
                interleavings(&mut pkts.clone(), &mut Vec::new(), &mut orders);
                for order in orders {
                    let mut r = rig(senders, 0, 0);
                    let mut frag_queue: Vec<Vec<usize>> = msgs.iter().map(|m| m.iter().flat_map(|&l| fragments(l)).collect()).collect();
                    for (s, m) in msgs.iter().enumerate() {
                        for &len in m {
                            r.f.post_send(r.qps[s], vec![WorkRequest::send(0, vec![s as u8; len], false)], 0).unwrap();
                        }
                    }
                    let mut arrival = Vec::new();
                    let mut placed: HashMap<usize, Vec<u64>> = HashMap::new();
                    for &s in &order {
                        arrival.push(frag_queue[s].remove(0));
                        for c in r.f.deliver_from(r.qps[s], 0).unwrap() {
                            if c.cq == r.cq {
                                placed.entry(s).or_default().extend(c.placement.iter().map(|p| p.addr));
                            }
                        }
                    }
                    // Rebuild the arrival-ordered address list from per-sender
                    // placements.
                    let mut cursor = vec![0usize; senders];
                    let addrs: Vec<u64> = order
                        .iter()
                        .map(|&s| {
                            cursor[s] += 1;
                            placed[&s][cursor[s] - 1]
                        })
                        .collect();
                    if let Err(e) = check_run(&mut r, &arrival, &addrs) {
                        return verdict(false, format!("order {order:?} msgs {msgs:?}: {e}"));
                    }
                    cases += 1;
                }
            }
        }
    }
    // Randomized: 20 single-packet messages over 4 senders, jittered arrival.
    let mut random = 0u64;
    for seed in 0..300u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let senders = rng.random_range(1..=4usize);
        let mut r = rig(senders, seed, 3 * NS_PER_US);
        let mut len_of = HashMap::new();
        for i in 0..20u64 {
            let s = rng.random_range(0..senders);
            // The first 8 bytes name the message, so lengths start at 8.
            let single: Vec<usize> = sizes.iter().copied().filter(|&l| l <= MTU).collect();
            let mut p = vec![0u8; single[rng.random_range(0..single.len())].max(8)];
            p[..8].copy_from_slice(&i.to_le_bytes());
            len_of.insert(i, p.len());
            r.f.post_send(r.qps[s], vec![WorkRequest::send(i, p, false)], rng.random_range(0..2000)).unwrap();
        }
        let recvs: Vec<_> = r.f.deliver_step(u64::MAX / 2).into_iter().filter(|c| c.cq == r.cq).collect();
        if recvs.len() != 20 {
            return verdict(false, format!("seed {seed}: {} of 20 received", recvs.len()));
        }
        let mut order = Vec::new();
        let mut addrs = Vec::new();
        for c in &recvs {
            let id = u64::from_le_bytes(r.f.pm(rowankv::fabric::NodeId(0)).read(c.placement[0].addr, 8).unwrap().try_into().unwrap());
            order.push(len_of[&id]);
            addrs.push(c.placement[0].addr);
        }
        if let Err(e) = check_run(&mut r, &order, &addrs) {
            return verdict(false, format!("seed {seed}: {e}"));
        }
        random += 1;
    }
    verdict(true, format!("{cases} exhaustive interleavings, {random} jittered 20-message runs"))
}

// ---- 8. GC transparency

fn snapshot(c: &Cluster, keys: u64) -> Vec<Option<Observed>> {
    (0..keys).map(|k| c.read_direct(&key_name(k))).collect()
}

fn gc_transparency(safety: &mut Safety) -> Verdict {
    let keys = 300;
    let mut collected = 0;
    let mut seeds_collecting = 0;
    for seed in 0..50u64 {
        let mut cfg = ClusterConfig {
            gc: false,
            ..ClusterConfig::default()
        };
        cfg.server.segment_size = 64 << 10;
        cfg.fabric.seed = seed;
        let mut c = Cluster::new(cfg, Box::new(mixed(seed, keys, 0.1))).unwrap();
        c.limit_ops(6_000 + seed * 40);
        c.start_clients();
        if !c.run_until_idle(c.now() + 500 * NS_PER_MS) {
            return verdict(false, format!("seed {seed}: workload did not finish at {} {:?}", c.now(), c.stats()));
        }
        // Let digests and CommitVer catch up so segments become eligible.
        c.run_for(40 * NS_PER_MS);
        let before = snapshot(&c, keys);
        let n = c.force_gc().unwrap();
        let after = snapshot(&c, keys);
        if before != after {
            let k = before.iter().zip(&after).position(|(a, b)| a != b).unwrap();
            return verdict(false, format!("seed {seed}: key {k} {:?} -> {:?}", before[k], after[k]));
        }
        if !c.verify_acked().is_empty() {
            return verdict(false, format!("seed {seed}: acked writes lost after GC"));
        }
        collected += n;
        seeds_collecting += (n > 0) as usize;
        safety.absorb(c.stats());
    }
    verdict(
        seeds_collecting == 50,
        format!("50 seeds, {collected} segments collected, {seeds_collecting} seeds with collections, maps identical"),
    )
}

// ---- 9. Cold start

fn cold_start(safety: &mut Safety) -> Verdict {
    let entries = 100_000u64;
    let mut cfg = ClusterConfig {
        clients: 48,
        ..ClusterConfig::default()
    };
    cfg.server.pm_capacity = 256 << 20;
    cfg.fabric.ack_drop_probability = 0.01;
    cfg.fabric.seed = 9;
    let mut c = Cluster::new(cfg, Box::new(Populate::new(entries, SizeModel::Fixed(48), 9))).unwrap();
    c.start_clients();
    if !c.run_until_idle(10_000 * NS_PER_MS) {
        return verdict(false, "populate did not finish");
    }
    c.run_for(20 * NS_PER_MS);
    let dropped = c.fabric().stats().acks_dropped;
    // Retried writes leave several copies of one (key, version) in PM.
    let mut dups = 0usize;
    for s in 0..cfg.servers {
        let e = c.engine(s).unwrap();
        let mut seen = HashSet::new();
        for d in e.collect_entries(c.fabric().pm(rowankv::fabric::NodeId(s)), |_, _, _| true) {
            if !seen.insert((d.entry.key.clone(), d.entry.version)) {
                dups += 1;
            }
        }
    }
    let acked = c.stats().puts_acked;
    safety.absorb(c.stats());
    c.crash_all();
    c.cold_start().unwrap();
    let mut mismatches = Vec::new();
    for k in 0..entries {
        let key = key_name(k);
        let want = c.oracle().floor(&key);
        let got = c.read_direct(&key).unwrap_or(Observed::ABSENT);
        if got != want {
            mismatches.push(format!("{}: {want:?} vs {got:?}", String::from_utf8_lossy(&key)));
        }
    }
    let absent_ok = c.read_direct(b"never-written") == Some(Observed::ABSENT);
    verdict(
        mismatches.is_empty() && absent_ok && acked >= entries && dropped > 0 && dups > 0,
        format!(
            "{acked} acked entries, {dropped} dropped acks, {dups} duplicate copies in PM, {} mismatches{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(" (first {m})")).unwrap_or_default()
        ),
    )
}

// ---- 10. Resharding

fn resharding(safety: &mut Safety) -> Verdict {
    let mut worst = 1.0f64;
    let mut moved = 0;
    for seed in 0..5u64 {
        let mut cfg = ClusterConfig {
            servers: 4,
            check_single_owner: true,
            clients: 16,
            ..ClusterConfig::default()
        };
        cfg.fabric.seed = seed;
        let mut c = Cluster::new(cfg, Box::new(mixed(seed, 400, 0.5))).unwrap();
        c.start_clients();
        c.run_for(10 * NS_PER_MS);
        let committed = c.store().committed().clone();
        let mut migs = Vec::new();
        for shard in [(seed % 12) as u16, ((seed + 5) % 12) as u16] {
            let p = committed.placement(shard);
            let target = (0..4).find(|s| !p.holds(*s)).unwrap();
            migs.push(Migration { source: p.primary, target, shard });
        }
        c.request_migrations(migs.clone());
        c.run_for(40 * NS_PER_MS);
        let now = c.store().committed();
        if !now.migrations.is_empty() {
            return verdict(false, format!("seed {seed}: migration unfinished"));
        }
        c.reset_served();
        c.run_for(10 * NS_PER_MS);
        for m in &migs {
            if c.store().committed().placement(m.shard).primary != m.target {
                return verdict(false, format!("seed {seed}: shard {} not moved", m.shard));
            }
            let served = c.served(m.shard);
            let total: u64 = served.values().sum();
            let frac = served.get(&m.target).copied().unwrap_or(0) as f64 / total.max(1) as f64;
            worst = worst.min(frac);
            moved += 1;
        }
        let st = c.stats();
        if !st.owner_violations.is_empty() {
            return verdict(false, format!("seed {seed}: {}", st.owner_violations[0]));
        }
        c.stop_clients();
        c.run_for(c.config().timing.client_timeout);
        if !c.verify_acked().is_empty() || !c.oracle().violations().is_empty() {
            return verdict(false, format!("seed {seed}: oracle violations"));
        }
        safety.absorb(c.stats());
    }
    verdict(
        worst >= 0.99,
        format!("{moved} shards moved, single-owner assertion never fired, target share of requests >= {:.4}", worst),
    )
}

fn timed(f: impl FnOnce() -> Verdict) -> (Verdict, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}

fn main() -> ExitCode {
    let mut safety = Safety::default();
    let mut results: Vec<(u32, &str, Verdict, f64)> = Vec::new();
    let mut push = |n, name, (v, secs): (Verdict, f64)| results.push((n, name, v, secs));
    push(1, "pm dlwa endpoints", timed(pm_sweep));
    push(2, "rowan dlwa bound", timed(rowan_bound));
    push(3, "strategy ordering", timed(ordering));
    let t = Instant::now();
    let crash = crash_runs(&mut safety);
    let secs = t.elapsed().as_secs_f64();
    push(
        4,
        "durability oracle",
        (
            verdict(
                crash.seeds >= 100 && crash.durability.is_empty(),
                format!(
                    "{} seeds, {} violations{}",
                    crash.seeds,
                    crash.durability.len(),
                    crash.durability.first().map(|v| format!(" (first {v})")).unwrap_or_default()
                ),
            ),
            secs,
        ),
    );
    push(
        5,
        "replica-set equality",
        (
            verdict(
                crash.unequal.is_empty() && crash.no_phase2.is_empty() && crash.replica_sets > 0,
                format!(
                    "{} shard replica sets compared, {} unequal, seeds without phase 2: {:?}",
                    crash.replica_sets,
                    crash.unequal.len(),
                    crash.no_phase2
                ),
            ),
            secs,
        ),
    );
    push(7, "mp srq placement law", timed(placement_law));
    push(8, "gc transparency", timed(|| gc_transparency(&mut safety)));
    push(9, "cold start", timed(|| cold_start(&mut safety)));
    push(10, "resharding single owner", timed(|| resharding(&mut safety)));
    push(
        6,
        "committed safety",
        (
            verdict(
                safety.violations.is_empty() && safety.commits_checked > 0,
                format!(
                    "{} runs, {} Used->Committed transitions checked, {} violations{}",
                    safety.runs,
                    safety.commits_checked,
                    safety.violations.len(),
                    safety.violations.first().map(|v| format!(" (first {v})")).unwrap_or_default()
                ),
            ),
            0.0,
        ),
    );
    results.sort_by_key(|r| r.0);
    for (n, name, v, secs) in &results {
        println!(
            "criterion {n:>2} {name:<24} {}  {} [{secs:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
