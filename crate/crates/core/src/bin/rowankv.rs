use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rowankv::bench::experiment::{csv_rows, write_csv, CsvRow};
use rowankv::bench::scenario::write_timeline_csv;
use rowankv::bench::sweep::write_sweep_csv;
use rowankv::bench::{
    dlwa_sweep, run_experiment, run_scenario, ExperimentSpec, KeyDistribution, Outcome, Scenario, SizeModel,
    WorkloadSpec,
};
use rowankv::cluster::ClusterConfig;
use rowankv::kv::Strategy;
use rowankv::pm::XPBUFFER_LINES;

#[derive(Parser)]
#[command(name = "rowankv", version, about = "Replicated PM key-value store simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// DLWA of round-robin sequential streams on one PM device.
    DlwaSweep(SweepArgs),
    /// YCSB-style runs across put ratios and replication strategies.
    Ycsb(YcsbArgs),
    /// Run a failover scenario and write its throughput timeline.
    Failover(ScenarioArgs),
    /// Run a load-shift scenario with automatic resharding.
    Reshard(ScenarioArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,8,16,32,48,64,80,96,112,128")]
    streams: Vec<usize>,
    /// Total bytes written per point.
    #[arg(long, default_value_t = 8 << 20)]
    total_bytes: u64,
    #[arg(long, default_value_t = 64)]
    write_size: usize,
    #[arg(long, default_value_t = XPBUFFER_LINES)]
    xpbuffer_capacity: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    servers: u32,
    #[arg(long, default_value_t = 24)]
    workers: usize,
    #[arg(long, default_value_t = 1 << 20)]
    segment_size: u64,
    #[arg(long, default_value_t = XPBUFFER_LINES)]
    xpbuffer_capacity: usize,
    /// Uniform per-packet network jitter in nanoseconds.
    #[arg(long, default_value_t = 3_000)]
    jitter: u64,
    #[arg(long, default_value_t = 8)]
    clients_per_worker: usize,
}

impl ClusterArgs {
    fn config(&self) -> ClusterConfig {
        let mut c = ClusterConfig::six_by_24(Strategy::Rowan);
        c.servers = self.servers;
        c.workers = self.workers;
        c.clients = self.clients_per_worker * self.servers as usize * self.workers;
        c.server.segment_size = self.segment_size;
        c.xpbuffer_capacity = self.xpbuffer_capacity;
        c.fabric.seed = self.seed;
        c.fabric.jitter = self.jitter;
        c.sync();
        c
    }
}

#[derive(Args)]
struct YcsbArgs {
    #[command(flatten)]
    cluster: ClusterArgs,
    /// Strategies to run, or "all".
    #[arg(long, value_delimiter = ',', default_value = "all")]
    strategy: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1.0,0.5,0.05,0.0")]
    put_ratios: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    keys: u64,
    #[arg(long, default_value = "zippydb")]
    size: SizeModel,
    #[arg(long)]
    uniform: bool,
    #[arg(long, default_value_t = 100_000)]
    ops: u64,
    #[arg(long, default_value_t = 10_000)]
    warmup: u64,
    /// Directory for one CSV per (ratio, strategy); summary goes to stdout.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario TOML; the built-in scenario is used when absent.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Print the scenario as TOML and exit.
    #[arg(long)]
    print_scenario: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Timeline CSV (stdout when absent).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn strategies(names: &[String]) -> Result<Vec<Strategy>> {
    if names.iter().any(|n| n.eq_ignore_ascii_case("all")) {
        return Ok(Strategy::ALL.to_vec());
    }
    names
        .iter()
        .map(|n| n.parse::<Strategy>().map_err(anyhow::Error::msg))
        .collect()
}

fn ycsb(a: &YcsbArgs) -> Result<()> {
    let cfg = a.cluster.config();
    let strats = strategies(&a.strategy)?;
    if let Some(d) = &a.out_dir {
        std::fs::create_dir_all(d)?;
    }
    let mut all: Vec<(f64, CsvRow)> = Vec::new();
    for &ratio in &a.put_ratios {
        for &s in &strats {
            let spec = ExperimentSpec {
                workload: WorkloadSpec {
                    put_ratio: ratio,
                    key_count: a.keys,
                    distribution: if a.uniform {
                        KeyDistribution::Uniform
                    } else {
                        KeyDistribution::Zipfian { theta: 0.99 }
                    },
                    size: a.size,
                    seed: a.cluster.seed,
                },
                populate: if ratio < 1.0 { a.keys } else { 0 },
                warmup: a.warmup,
                ops: a.ops,
                ..ExperimentSpec::default()
            };
            let r = run_experiment(&cfg, &spec, s).with_context(|| format!("{s} at put ratio {ratio}"))?;
            if r.outcome == Outcome::Saturated {
                eprintln!("warning: {s} at put ratio {ratio} saturated; metrics are partial");
            }
            let rows = csv_rows(&r);
            if let Some(d) = &a.out_dir {
                let f = File::create(d.join(format!("ycsb_{}_{ratio}.csv", s.name().to_lowercase())))?;
                write_csv(&rows, f)?;
            }
            eprintln!(
                "{:>5} put={ratio:<4} dlwa={:.3} max={:.3} {:.2} Mops/s p50={:.1}us p99={:.1}us",
                s.name(),
                r.dlwa(),
                r.max_dlwa(),
                r.throughput() / 1e6,
                r.p50_us,
                r.p99_us
            );
            eprintln!(
                "      per server: {:?}",
                r.servers.iter().map(|x| format!("{:.3}", x.dlwa)).collect::<Vec<_>>()
            );
            all.extend(rows.into_iter().map(|row| (ratio, row)));
        }
    }
    let mut w = csv::Writer::from_writer(io::stdout().lock());
    w.write_record(["put_ratio", "server", "strategy", "request_bytes", "media_bytes", "dlwa", "ops", "p50", "p99"])?;
    for (ratio, r) in all {
        w.write_record([
            ratio.to_string(),
            r.server,
            r.strategy,
            r.request_bytes.to_string(),
            r.media_bytes.to_string(),
            r.dlwa.to_string(),
            r.ops.to_string(),
            r.p50.to_string(),
            r.p99.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn scenario(a: &ScenarioArgs, builtin: Scenario) -> Result<()> {
    let mut sc = match &a.scenario {
        Some(p) => Scenario::from_toml(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => builtin,
    };
    if let Some(s) = a.seed {
        sc.cluster.seed = s;
        sc.workload.seed = s;
    }
    if let Some(s) = a.strategy {
        sc.cluster.strategy = s;
    }
    if a.print_scenario {
        print!("{}", sc.to_toml()?);
        return Ok(());
    }
    if sc.cluster.strategy != Strategy::Rowan && sc.events.iter().any(|e| !matches!(e.action, rowankv::bench::scenario::Action::Start | rowankv::bench::scenario::Action::Stop | rowankv::bench::scenario::Action::Measure { .. })) {
        bail!("failover and resharding are implemented for the ROWAN strategy only");
    }
    let r = run_scenario(&sc)?;
    for (t, m) in &r.markers {
        eprintln!("{:>9.3}ms  {m}", *t as f64 / 1e6);
    }
    eprintln!(
        "acked puts {}; oracle violations {}; owner violations {}; commit violations {}; replicas equal {}; final term {}",
        r.acked_puts,
        r.oracle_violations.len(),
        r.owner_violations.len(),
        r.commit_violations.len(),
        r.replicas_equal,
        r.final_term
    );
    write_timeline_csv(&r.timeline, output(&a.out)?)?;
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::DlwaSweep(a) => {
            let pts = dlwa_sweep(&a.streams, a.total_bytes, a.write_size, a.xpbuffer_capacity)?;
            write_sweep_csv(&pts, output(&a.out)?)?;
        }
        Cmd::Ycsb(a) => ycsb(a)?,
        Cmd::Failover(a) => scenario(a, Scenario::failover())?,
        Cmd::Reshard(a) => scenario(a, Scenario::reshard())?,
    }
    Ok(())
}
