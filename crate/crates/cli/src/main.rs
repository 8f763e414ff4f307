use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use gossiplab::altchain::{checkpoint_floor, checkpoint_scenario, plan_alternative_chain, validate_chain};
use gossiplab::analysis::{
    attack_cost, churn_false_positive_rate, overlap_spectrum, success_probability, two_tuple_false_candidates,
    ChurnInput, CostModelInput, SuccessModelInput, TESTNET_P3,
};
use gossiplab::netsim::{DelayModel, World, WorldConfig};
use gossiplab::protocol::NodeId;
use gossiplab::scenario::{run_scenario, Scenario};
use gossiplab::topology::{
    enumerate_neighbors, estimate_degree, getaddr_miss_probability, markov_getaddr_expectation, DiscoveryConfig,
    MarkerSet, TimestampPolicy,
};

#[derive(Parser)]
#[command(name = "gossiplab", version, about = "Bitcoin gossip simulator and deanonymization toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario file.
    Run {
        scenario: PathBuf,
        /// Base seed; defaults to the world seed in the file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        replicas: Option<usize>,
        /// Output directory; defaults to the scenario's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Validate and print the resolved config without running.
        #[arg(long)]
        dry_run: bool,
    },
    /// Analytic models.
    Analyze {
        #[command(subcommand)]
        sub: Analyze,
    },
    /// Topology probes against a generated world.
    Probe {
        #[command(subcommand)]
        sub: Probe,
    },
}

#[derive(Args)]
struct CsvOut {
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Attack success probability against the number of matched entries.
    Success {
        #[arg(long, default_value_t = 0.34)]
        p_addr: f64,
        /// Comma-separated P(L = 0..8); defaults to the testnet table.
        #[arg(long, value_delimiter = ',')]
        p3: Option<Vec<f64>>,
        #[arg(long, default_value_t = 100_000)]
        clients: u64,
        #[arg(long, default_value_t = 8000)]
        servers: u64,
        #[command(flatten)]
        out: CsvOut,
    },
    /// Bandwidth and monthly cost of the rebroadcasts.
    Cost {
        #[arg(long, default_value_t = 8000)]
        servers: u64,
        #[arg(long, default_value_t = 100_000)]
        candidates: u64,
        #[arg(long, default_value_t = 325)]
        msg_bytes: u64,
        #[arg(long, default_value_t = 10)]
        per_msg: u64,
        #[arg(long, default_value_t = 600)]
        period_secs: u64,
        #[arg(long, default_value_t = 50)]
        rented: u64,
        #[arg(long, default_value_t = 25.0)]
        price: f64,
        #[command(flatten)]
        out: CsvOut,
    },
    /// Expected GETADDR rounds to see a whole address database.
    Markov {
        #[arg(long, default_value_t = 20480)]
        db: usize,
        #[arg(long, default_value_t = 2500)]
        per_reply: usize,
        #[command(flatten)]
        out: CsvOut,
    },
    /// Cheapest alternative chain past a checkpoint.
    Altchain {
        /// Difficulty of the honest chain at the fork.
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
        #[arg(long, default_value_t = 100.0)]
        checkpoint_day: f64,
        #[arg(long, default_value_t = 134.0)]
        days_after: f64,
        #[arg(long, default_value_t = 25_000)]
        blocks: u64,
        /// Per-block plan CSV (index, timestamp, difficulty).
        #[arg(long)]
        plan_csv: Option<PathBuf>,
        #[command(flatten)]
        out: CsvOut,
    },
    /// Monte-Carlo rate of addresses leaking past the attacker between rebroadcasts.
    Churn {
        #[arg(long, default_value_t = 50)]
        m: u64,
        #[arg(long, default_value_t = 75)]
        n: u64,
        #[arg(long, default_value_t = 600)]
        interval_secs: u64,
        /// Mean new connections per interval.
        #[arg(long, default_value_t = 0.5)]
        arrivals: f64,
        #[arg(long, default_value_t = 0.5)]
        departures: f64,
        #[arg(long, value_delimiter = ',', default_value = "600,1800,3600")]
        dt: Vec<u64>,
        #[arg(long, default_value_t = 10_000)]
        runs: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: CsvOut,
    },
}

#[derive(Subcommand)]
enum Probe {
    /// Estimate a server's degree with marker addresses.
    Degree {
        #[arg(long, default_value_t = 200)]
        servers: usize,
        /// Force the target to this many server neighbours.
        #[arg(long, value_delimiter = ',', default_value = "10,30,70,100")]
        k: Vec<usize>,
        /// Markers per run; defaults scale with k.
        #[arg(long)]
        markers: Option<u64>,
        /// Listening connections; defaults scale with k.
        #[arg(long)]
        listeners: Option<usize>,
        #[arg(long, default_value_t = 5)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: CsvOut,
    },
    /// Find a server's neighbours with near-expiry markers.
    Discover {
        #[arg(long, default_value_t = 100)]
        servers: usize,
        #[arg(long, default_value_t = 0)]
        target: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[command(flatten)]
        out: CsvOut,
    },
}

struct Table {
    head: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(head: Vec<&'static str>) -> Self {
        Table { head, rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.head.len());
        self.rows.push(row);
    }

    fn print(&self) {
        let mut w: Vec<usize> = self.head.iter().map(|h| h.len()).collect();
        for r in &self.rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.len());
            }
        }
        let line = |cells: Vec<&str>| {
            let s: Vec<String> = cells.iter().zip(&w).map(|(c, w)| format!("{c:>w$}")).collect();
            println!("{}", s.join("  ").trim_end());
        };
        line(self.head.clone());
        for r in &self.rows {
            line(r.iter().map(String::as_str).collect());
        }
    }

    fn emit(&self, out: &CsvOut) -> Result<()> {
        self.print();
        if let Some(p) = &out.csv {
            write_csv(p, &self.head, &self.rows)?;
        }
        Ok(())
    }
}

fn write_csv(path: &Path, head: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(head)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn f(x: f64, prec: usize) -> String {
    format!("{x:.prec$}")
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { scenario, seed, replicas, out, dry_run } => run_cmd(&scenario, seed, replicas, out, dry_run),
        Cmd::Analyze { sub } => analyze(sub).map(|_| ExitCode::SUCCESS),
        Cmd::Probe { sub } => probe(sub).map(|_| ExitCode::SUCCESS),
    }
}

fn run_cmd(path: &Path, seed: Option<u64>, replicas: Option<usize>, out: Option<PathBuf>, dry_run: bool) -> Result<ExitCode> {
    let mut sc = Scenario::load(path)?;
    if let Some(r) = replicas {
        sc.replicas = r;
    }
    if let Some(o) = out {
        sc.output_dir = Some(o);
    }
    if let Some(s) = seed {
        sc.world.seed = s;
    }
    sc.validate()?;
    if dry_run {
        println!("{}", serde_json::to_string_pretty(&sc)?);
        return Ok(ExitCode::SUCCESS);
    }
    let summary = run_scenario(&sc, sc.world.seed, sc.replicas, sc.output_dir.as_deref())?;
    println!("{}: {} replica(s), base seed {}", summary.name, summary.replicas.len(), summary.base_seed);
    let mut t = Table::new(vec!["metric", "mean", "ci95"]);
    for (name, m) in &summary.metrics {
        t.push(vec![name.clone(), f(m.mean, 4), f(m.ci95, 4)]);
    }
    t.print();
    for r in summary.replicas.iter().filter(|r| !r.invariants_ok) {
        eprintln!("replica {}: invariant violated: {}", r.seed, r.invariant_error.as_deref().unwrap_or("?"));
    }
    if let Some(dir) = &sc.output_dir {
        println!("artifacts in {}", dir.display());
    }
    Ok(if summary.all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn analyze(sub: Analyze) -> Result<()> {
    match sub {
        Analyze::Success { p_addr, p3, clients, servers, out } => {
            let input = SuccessModelInput {
                p3: p3.unwrap_or_else(|| TESTNET_P3.to_vec()),
                ..SuccessModelInput::testnet(p_addr)
            };
            let spec = overlap_spectrum(&input)?;
            let mut t = Table::new(vec!["m", "p_exact", "p_success"]);
            for (m, p) in spec.iter().enumerate() {
                let ps = if m == 0 { 1.0 } else { success_probability(m as u64, &input)? };
                t.push(vec![m.to_string(), f(*p, 4), f(ps, 4)]);
            }
            t.emit(&out)?;
            let wrong = two_tuple_false_candidates(clients, input.n_entry, 10, servers);
            println!("2-tuple rule: {wrong:.2} wrong candidates per transaction on average");
        }
        Analyze::Cost { servers, candidates, msg_bytes, per_msg, period_secs, rented, price, out } => {
            let input = CostModelInput {
                n_servers: servers,
                n_candidates: candidates,
                addr_msg_bytes: msg_bytes,
                addrs_per_msg: per_msg,
                rebroadcast_period_secs: period_secs,
                rented_servers: rented,
                server_month_price: price,
                ..Default::default()
            };
            let r = attack_cost(&input)?;
            let mut t = Table::new(vec!["quantity", "value"]);
            t.push(vec!["bytes_per_round".into(), r.bytes_per_round.to_string()]);
            t.push(vec!["gb_per_round".into(), f(r.traffic_gb_per_period, 1)]);
            t.push(vec!["rounds_per_month".into(), r.rounds_per_month.to_string()]);
            t.push(vec!["gb_per_month".into(), f(r.traffic_gb_per_month, 0)]);
            t.push(vec!["rental_cost".into(), f(r.rental_cost, 2)]);
            t.push(vec!["overage_cost".into(), f(r.overage_cost, 2)]);
            t.push(vec!["monthly_cost".into(), f(r.monthly_cost, 2)]);
            t.emit(&out)?;
        }
        Analyze::Markov { db, per_reply, out } => {
            let e = markov_getaddr_expectation(db, per_reply)?;
            let rounds = e.ceil() as u32;
            let mut t = Table::new(vec!["db_size", "per_reply", "expected_getaddr", "miss_after_expected"]);
            t.push(vec![
                db.to_string(),
                per_reply.to_string(),
                f(e, 2),
                format!("{:.3e}", getaddr_miss_probability(db, per_reply, rounds)),
            ]);
            t.emit(&out)?;
        }
        Analyze::Altchain { difficulty, checkpoint_day, days_after, blocks, plan_csv, out } => {
            let (history, rule, now) = checkpoint_scenario(difficulty, checkpoint_day, days_after);
            let plan = plan_alternative_chain(&history, blocks, now, &rule)?;
            let mut full = history[..history.len() - 1].to_vec();
            full.extend_from_slice(&plan.blocks);
            validate_chain(&full, &rule, now).map_err(|v| anyhow::anyhow!("plan fails validation: {v}"))?;
            let floor = checkpoint_floor(now, &rule)?;
            let tail = plan.blocks.last().map_or(difficulty, |b| b.difficulty);
            let mut t = Table::new(vec!["quantity", "value"]);
            t.push(vec!["reference_difficulty".into(), format!("{difficulty}")]);
            t.push(vec!["checkpoint_floor".into(), format!("{floor:.6}")]);
            t.push(vec!["tail_difficulty".into(), format!("{tail:.6}")]);
            t.push(vec!["tail_fraction_inverse".into(), f(difficulty / tail, 2)]);
            t.push(vec!["total_work".into(), f(plan.total_work, 3)]);
            t.push(vec!["cost_in_reference_blocks".into(), f(plan.total_work / difficulty, 2)]);
            t.push(vec!["cost_in_checkpoint_blocks".into(), f(plan.cost_in_reference_blocks, 2)]);
            t.emit(&out)?;
            if let Some(p) = plan_csv {
                let rows: Vec<Vec<String>> = plan
                    .blocks
                    .iter()
                    .map(|b| vec![b.index.to_string(), b.timestamp.to_string(), format!("{:e}", b.difficulty)])
                    .collect();
                write_csv(&p, &["index", "timestamp", "difficulty"], &rows)?;
            }
        }
        Analyze::Churn { m, n, interval_secs, arrivals, departures, dt, runs, seed, out } => {
            let input = ChurnInput::poisson(m, n, interval_secs, arrivals, departures);
            let mut t = Table::new(vec!["dt_secs", "false_positive_rate"]);
            for d in dt {
                let r = churn_false_positive_rate(&input, d, runs, seed)?;
                t.push(vec![d.to_string(), f(r, 4)]);
            }
            t.emit(&out)?;
        }
    }
    Ok(())
}

fn probe_world(servers: usize, seed: u64) -> Result<World> {
    let mut cfg = WorldConfig::new(servers, 0, seed);
    cfg.delay_model = DelayModel::constant(1000);
    Ok(World::build(cfg)?)
}

/// Markers and listeners for a degree probe: more of both for busier nodes.
fn degree_probe_budget(k: usize) -> (u64, usize) {
    match k {
        0..=19 => (500, 2),
        20..=49 => (1000, 3),
        50..=84 => (1000, 7),
        _ => (2000, 10),
    }
}

fn probe(sub: Probe) -> Result<()> {
    match sub {
        Probe::Degree { servers, k, markers, listeners, runs, seed, out } => {
            let mut t = Table::new(vec!["k", "markers", "listeners", "run", "k_hat"]);
            for &kk in &k {
                let (dm, dl) = degree_probe_budget(kk);
                let (markers, listeners) = (markers.unwrap_or(dm), listeners.unwrap_or(dl));
                if kk + 1 > servers {
                    bail!("--servers {servers} too small for k = {kk}");
                }
                let mut sum = 0.0;
                for r in 0..runs {
                    let mut w = probe_world(servers, seed.wrapping_add(r as u64 * 1000 + kk as u64))?;
                    let target = NodeId(0);
                    w.force_server_degree(target, kk)?;
                    let est = estimate_degree(&mut w, target, &MarkerSet::new(0, markers, TimestampPolicy::Fresh), listeners, 1)?;
                    sum += est.k_hat;
                    t.push(vec![kk.to_string(), markers.to_string(), listeners.to_string(), (r + 1).to_string(), f(est.k_hat, 2)]);
                }
                t.push(vec![kk.to_string(), markers.to_string(), listeners.to_string(), "mean".into(), f(sum / runs as f64, 2)]);
            }
            t.emit(&out)?;
        }
        Probe::Discover { servers, target, seed, out } => {
            let mut w = probe_world(servers, seed)?;
            let a = NodeId(target);
            let truth = w.server_neighbors(a);
            let cands: Vec<NodeId> = w.server_ids().filter(|&s| s != a).collect();
            let rep = enumerate_neighbors(&mut w, a, &cands, &DiscoveryConfig::default())?;
            let mut t = Table::new(vec!["candidate", "markers_held", "predicted", "connected"]);
            for (c, held) in &rep.estimates {
                let pred = rep.neighbors.contains(c);
                let real = truth.contains(c);
                if pred || real {
                    t.push(vec![c.0.to_string(), f(*held, 1), pred.to_string(), real.to_string()]);
                }
            }
            t.emit(&out)?;
            let fp = rep.neighbors.iter().filter(|c| !truth.contains(c)).count();
            let miss = truth.iter().filter(|c| !rep.neighbors.contains(c)).count();
            println!(
                "k_hat {:.1}, true degree {}, found {}, false positives {fp}, missed {miss}",
                rep.k_hat,
                truth.len(),
                rep.neighbors.len()
            );
        }
    }
    Ok(())
}
