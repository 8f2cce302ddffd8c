//! Runs one workload against one replication strategy and reports DLWA,
//! throughput and latency.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::workload::{Populate, Workload, WorkloadSpec};
use super::BenchError;
use crate::cluster::{Cluster, ClusterConfig};
use crate::kv::Strategy;
use crate::{Time, NS_PER_MS, NS_PER_US};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub workload: WorkloadSpec,
    /// Keys written before measurement starts (0 to skip).
    pub populate: u64,
    /// Unmeasured requests after populating.
    pub warmup: u64,
    /// Measured requests.
    pub ops: u64,
    /// Simulated-time cap for the measured phase.
    pub time_limit: Time,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            workload: WorkloadSpec::load_a(),
            populate: 0,
            warmup: 20_000,
            ops: 200_000,
            time_limit: 2_000 * NS_PER_MS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Completed,
    /// Ran out of free segments or hit the time cap; metrics are partial.
    Saturated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerResult {
    pub server: u32,
    pub request_bytes: u64,
    pub media_bytes: u64,
    pub dlwa: f64,
    pub ops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub strategy: Strategy,
    pub servers: Vec<ServerResult>,
    pub ops: u64,
    /// Simulated microseconds.
    pub p50_us: f64,
    pub p99_us: f64,
    pub elapsed: Time,
    pub blogs_per_server: usize,
    pub outcome: Outcome,
}

impl ExperimentResult {
    pub fn request_bytes(&self) -> u64 {
        self.servers.iter().map(|s| s.request_bytes).sum()
    }

    pub fn media_bytes(&self) -> u64 {
        self.servers.iter().map(|s| s.media_bytes).sum()
    }

    pub fn dlwa(&self) -> f64 {
        ratio(self.media_bytes(), self.request_bytes())
    }

    pub fn max_dlwa(&self) -> f64 {
        self.servers.iter().map(|s| s.dlwa).fold(0.0, f64::max)
    }

    /// Operations per simulated second.
    pub fn throughput(&self) -> f64 {
        if self.elapsed == 0 {
            0.0
        } else {
            self.ops as f64 * 1e9 / self.elapsed as f64
        }
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Nearest-rank percentile.
pub fn percentile(sorted: &[Time], p: f64) -> Time {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

pub fn run_experiment(
    cluster: &ClusterConfig,
    spec: &ExperimentSpec,
    strategy: Strategy,
) -> Result<ExperimentResult, BenchError> {
    let mut cfg = *cluster;
    cfg.strategy = strategy;
    cfg.sync();
    let workload = Workload::new(spec.workload)?;
    let mut c = Cluster::new(cfg, Box::new(Populate::new(spec.populate, spec.workload.size, spec.workload.seed)))?;
    let deadline = |c: &Cluster| c.now() + spec.time_limit;
    let mut saturated = false;
    if spec.populate > 0 {
        c.start_clients();
        let d = deadline(&c);
        saturated |= !c.run_until_idle(d);
    }
    // Warmup flows straight into the measured phase so that clients never
    // drain in between.
    c.set_source(Box::new(workload));
    c.reset_measurement();
    c.limit_ops(spec.warmup + spec.ops);
    c.start_clients();
    let d = deadline(&c);
    saturated |= !c.run_until_completed(spec.warmup, d);
    c.reset_measurement();
    let start = c.now();
    let d = deadline(&c);
    saturated |= !c.run_until_idle(d);
    let elapsed = c.now() - start;
    c.flush_pm();
    saturated |= c.stats().out_of_space;

    let served = c.served_by_server();
    let servers = (0..cfg.servers)
        .map(|s| {
            let pc = c.pm_counters(s);
            ServerResult {
                server: s,
                request_bytes: pc.request_bytes,
                media_bytes: pc.media_bytes,
                dlwa: ratio(pc.media_bytes, pc.request_bytes),
                ops: served.get(&s).copied().unwrap_or(0),
            }
        })
        .collect();
    let mut lat = c.latencies().to_vec();
    lat.sort_unstable();
    Ok(ExperimentResult {
        strategy,
        servers,
        ops: c.stats().completed,
        p50_us: percentile(&lat, 0.50) as f64 / NS_PER_US as f64,
        p99_us: percentile(&lat, 0.99) as f64 / NS_PER_US as f64,
        elapsed,
        blogs_per_server: strategy.blogs_per_server(cfg.servers as usize, cfg.workers),
        outcome: if saturated { Outcome::Saturated } else { Outcome::Completed },
    })
}

/// One CSV row; the last row of a file aggregates all servers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub server: String,
    pub strategy: String,
    pub request_bytes: u64,
    pub media_bytes: u64,
    pub dlwa: f64,
    pub ops: u64,
    pub p50: f64,
    pub p99: f64,
}

pub const CSV_HEADER: [&str; 8] = [
    "server",
    "strategy",
    "request_bytes",
    "media_bytes",
    "dlwa",
    "ops",
    "p50",
    "p99",
];

pub fn csv_rows(r: &ExperimentResult) -> Vec<CsvRow> {
    if r.servers.is_empty() {
        return Vec::new();
    }
    let name = r.strategy.name().to_string();
    let mut rows: Vec<CsvRow> = r
        .servers
        .iter()
        .map(|s| CsvRow {
            server: s.server.to_string(),
            strategy: name.clone(),
            request_bytes: s.request_bytes,
            media_bytes: s.media_bytes,
            dlwa: s.dlwa,
            ops: s.ops,
            p50: r.p50_us,
            p99: r.p99_us,
        })
        .collect();
    rows.push(CsvRow {
        server: "all".into(),
        strategy: name,
        request_bytes: r.request_bytes(),
        media_bytes: r.media_bytes(),
        dlwa: r.dlwa(),
        ops: r.ops,
        p50: r.p50_us,
        p99: r.p99_us,
    });
    rows
}

pub fn write_csv<W: io::Write>(rows: &[CsvRow], out: W) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<CsvRow>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn emit_csv(result: &ExperimentResult, path: &Path) -> Result<(), BenchError> {
    let f = std::fs::File::create(path)?;
    write_csv(&csv_rows(result), f)
}
