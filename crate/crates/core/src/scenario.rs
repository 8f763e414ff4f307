//! Scenario files: a world, an attacker and a client schedule, run for a
//! number of seeded replicas with the results aggregated.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attacker::{enumerate_servers, evaluate, AttackError, AttackReport, Attacker, AttackerConfig, RecordRow};
use crate::hash::mix64;
use crate::netsim::{NetsimError, World, WorldConfig};
use crate::protocol::{Millis, NodeId, MS_PER_SEC};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {}: {err}", path.display())]
    Io { path: PathBuf, err: std::io::Error },
    #[error("{}: {err}", path.display())]
    Parse { path: PathBuf, err: serde_json::Error },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("writing output: {0}")]
    Output(String),
}

/// Metric taps a scenario may ask for.
pub const TAPS: &[&str] = &[
    "deanon_rate",
    "mean_observed_entries",
    "entry_precision",
    "immediate_ge3",
    "trickled_ge3",
    "three_level_unique",
    "client_txs",
    "achieved_connections_mean",
];

fn tap(name: &str, r: &AttackReport) -> Option<f64> {
    Some(match name {
        "deanon_rate" => r.deanon_rate,
        "mean_observed_entries" => r.mean_observed_entries,
        "entry_precision" => r.entry_precision,
        "immediate_ge3" => r.immediate_ge3,
        "trickled_ge3" => r.trickled_ge3,
        "three_level_unique" => r.three_level_unique as f64,
        "client_txs" => r.client_txs as f64,
        "achieved_connections_mean" => r.achieved_connections_mean,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedSession {
    /// Index into the world's clients.
    pub client: usize,
    pub start_secs: f64,
    #[serde(default)]
    pub end_secs: Option<f64>,
    /// Transaction times, seconds from the session start.
    #[serde(default)]
    pub tx_offsets_secs: Vec<f64>,
}

/// Sessions laid out automatically: every client runs `sessions_per_client`
/// sessions one after another, starting at random within `start_window_secs`
/// after the first rebroadcast; `total_txs` are dealt round-robin over all
/// sessions and placed uniformly inside `tx_window_secs` after the connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedSessions {
    pub sessions_per_client: usize,
    pub total_txs: usize,
    pub session_secs: f64,
    /// Offline time between two sessions of the same client.
    pub gap_secs: f64,
    pub start_window_secs: f64,
    /// Transactions fall in `[lead, lead + tx_window]` after the connect.
    pub tx_lead_secs: f64,
    pub tx_window_secs: f64,
}

fn default_attacker_start() -> u64 {
    600
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    /// First rebroadcast; the attacker connects at time zero.
    #[serde(default = "default_attacker_start")]
    pub attacker_start_secs: u64,
    #[serde(default)]
    pub sessions: Vec<ScriptedSession>,
    #[serde(default)]
    pub generated: Option<GeneratedSessions>,
    /// Simulation end; defaults to one hour after the last scheduled event.
    #[serde(default)]
    pub end_secs: Option<f64>,
}

fn default_replicas() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub world: WorldConfig,
    #[serde(default)]
    pub attacker: AttackerConfig,
    pub schedule: Schedule,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub metrics: Vec<String>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Scenario, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|err| ScenarioError::Io { path: path.into(), err })?;
        let sc: Scenario = serde_json::from_str(&text).map_err(|err| ScenarioError::Parse { path: path.into(), err })?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.replicas < 1 {
            return Err(ScenarioError::Invalid("replicas: must be >= 1".into()));
        }
        for m in &self.metrics {
            if !TAPS.contains(&m.as_str()) {
                return Err(ScenarioError::Invalid(format!("metrics: unknown tap {m:?} (known: {})", TAPS.join(", "))));
            }
        }
        self.world.validate().map_err(|e| ScenarioError::Invalid(format!("world: {e}")))?;
        self.attacker.validate().map_err(|e| ScenarioError::Invalid(format!("attacker: {e}")))?;
        for (i, s) in self.schedule.sessions.iter().enumerate() {
            if s.client >= self.world.n_clients {
                return Err(ScenarioError::Invalid(format!("schedule.sessions[{i}].client: {} out of range", s.client)));
            }
            if s.end_secs.is_some_and(|e| e < s.start_secs) || s.start_secs < 0.0 {
                return Err(ScenarioError::Invalid(format!("schedule.sessions[{i}]: bad session window")));
            }
        }
        if let Some(g) = &self.schedule.generated {
            if self.world.n_clients == 0 || g.sessions_per_client == 0 {
                return Err(ScenarioError::Invalid("schedule.generated: needs clients and sessions".into()));
            }
            if g.tx_lead_secs + g.tx_window_secs > g.session_secs {
                return Err(ScenarioError::Invalid("schedule.generated: transactions must fall inside the session".into()));
            }
        }
        Ok(())
    }
}

/// Seed of replica `r` derived from the base seed.
pub fn replica_seed(base: u64, r: usize) -> u64 {
    mix64(base ^ (r as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[derive(Debug, Clone, PartialEq)]
struct Session {
    client: usize,
    start: Millis,
    end: Option<Millis>,
    txs: Vec<Millis>,
}

fn layout(sc: &Scenario, seed: u64) -> Vec<Session> {
    let base = sc.schedule.attacker_start_secs as f64;
    let ms = |s: f64| (s * MS_PER_SEC as f64).round() as Millis;
    let mut out: Vec<Session> = sc
        .schedule
        .sessions
        .iter()
        .map(|s| Session {
            client: s.client,
            start: ms(s.start_secs),
            end: s.end_secs.map(ms),
            txs: s.tx_offsets_secs.iter().map(|o| ms(s.start_secs + o)).collect(),
        })
        .collect();
    if let Some(g) = &sc.schedule.generated {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let n = sc.world.n_clients;
        let mut generated = Vec::new();
        for c in 0..n {
            let mut t = base + 60.0 + rng.random::<f64>() * g.start_window_secs;
            for _ in 0..g.sessions_per_client {
                generated.push(Session { client: c, start: ms(t), end: Some(ms(t + g.session_secs)), txs: Vec::new() });
                t += g.session_secs + g.gap_secs;
            }
        }
        let k = generated.len();
        for i in 0..g.total_txs {
            let s = &mut generated[i % k];
            let off = g.tx_lead_secs + rng.random::<f64>() * g.tx_window_secs;
            s.txs.push(s.start + ms(off));
        }
        out.extend(generated);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicaSummary {
    pub seed: u64,
    pub digest: String,
    pub invariants_ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub invariant_error: Option<String>,
    pub report: AttackReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Half-width of a normal 95% interval over replicas.
    pub ci95: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema: u32,
    pub name: String,
    pub base_seed: u64,
    pub replicas: Vec<ReplicaSummary>,
    pub metrics: IndexMap<String, MetricSummary>,
    pub all_ok: bool,
}

pub struct ReplicaOutcome {
    pub summary: ReplicaSummary,
    pub rows: Vec<RecordRow>,
    pub world: World,
}

/// One seeded run: build the world, enumerate and connect to every server,
/// start the rebroadcast cycle, play the schedule and score the result.
pub fn run_replica(sc: &Scenario, seed: u64) -> Result<ReplicaOutcome, ScenarioError> {
    let mut wc = sc.world.clone();
    wc.seed = seed;
    let mut world = World::build(wc)?;
    let servers = enumerate_servers(&mut world, &[NodeId(0)])?;
    let mut acfg = sc.attacker.clone();
    if acfg.candidate_addresses.is_empty() {
        let mut c: Vec<NodeId> = world.client_ids().map(|c| world.node(c).expect("client").public_addr).collect();
        c.sort();
        c.dedup();
        acfg.candidate_addresses = c;
    }
    let mut attacker = Attacker::new(acfg)?;
    attacker.establish_listeners(&mut world, &servers)?;
    attacker.schedule(&mut world, sc.schedule.attacker_start_secs * MS_PER_SEC);

    let clients: Vec<NodeId> = world.client_ids().collect();
    let mut last = sc.schedule.attacker_start_secs * MS_PER_SEC;
    for s in layout(sc, seed) {
        let c = clients[s.client];
        world.schedule_session(c, s.start, s.end)?;
        last = last.max(s.end.unwrap_or(s.start));
        for t in s.txs {
            world.schedule_tx(c, t)?;
            last = last.max(t);
        }
    }
    let end = sc.schedule.end_secs.map_or(last + 3_600_000, |e| (e * MS_PER_SEC as f64) as Millis);
    world.run_until(end, &mut attacker);

    let (report, rows) = evaluate(&world, &attacker);
    let inv = world.check_invariants();
    Ok(ReplicaOutcome {
        summary: ReplicaSummary {
            seed,
            digest: format!("{:016x}", world.digest()),
            invariants_ok: inv.is_ok(),
            invariant_error: inv.err(),
            report,
        },
        rows,
        world,
    })
}

// csv cannot flatten, so the row is spelled out with the seed in front.
#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    seed: u64,
    tx_id: u64,
    ip: Option<u64>,
    session_id: Option<u64>,
    tuple_level: &'a str,
    n_candidates: usize,
    correct: bool,
}

/// Runs `replicas` seeded replicas in parallel and, if `out` is given,
/// writes `events-<seed>.ndjson`, `records.csv` and `summary.json` there.
pub fn run_scenario(sc: &Scenario, base_seed: u64, replicas: usize, out: Option<&Path>) -> Result<Summary, ScenarioError> {
    sc.validate()?;
    if replicas < 1 {
        return Err(ScenarioError::Invalid("replicas: must be >= 1".into()));
    }
    let seeds: Vec<u64> = (0..replicas).map(|r| replica_seed(base_seed, r)).collect();
    let mut outcomes: Vec<ReplicaOutcome> = seeds.par_iter().map(|&s| run_replica(sc, s)).collect::<Result<_, _>>()?;
    outcomes.sort_by_key(|o| o.summary.seed);

    let names: Vec<String> = if sc.metrics.is_empty() { TAPS.iter().map(|s| s.to_string()).collect() } else { sc.metrics.clone() };
    let mut metrics = IndexMap::new();
    for name in names {
        let values: Vec<f64> = outcomes.iter().map(|o| tap(&name, &o.summary.report).expect("validated tap")).collect();
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        metrics.insert(name, MetricSummary { mean, ci95: 1.96 * (var / n).sqrt(), values });
    }
    let summary = Summary {
        schema: 1,
        name: sc.name.clone(),
        base_seed,
        all_ok: outcomes.iter().all(|o| o.summary.invariants_ok),
        replicas: outcomes.iter().map(|o| o.summary.clone()).collect(),
        metrics,
    };

    if let Some(dir) = out {
        write_outputs(dir, &outcomes, &summary).map_err(|e| ScenarioError::Output(e.to_string()))?;
    }
    Ok(summary)
}

fn write_outputs(dir: &Path, outcomes: &[ReplicaOutcome], summary: &Summary) -> Result<(), Box<dyn std::error::Error>> {
    fs::create_dir_all(dir)?;
    for o in outcomes {
        let f = fs::File::create(dir.join(format!("events-{}.ndjson", o.summary.seed)))?;
        o.world.write_log(BufWriter::new(f))?;
    }
    let mut w = csv::Writer::from_path(dir.join("records.csv"))?;
    for o in outcomes {
        for row in &o.rows {
            w.serialize(CsvRow {
                seed: o.summary.seed,
                tx_id: row.tx_id,
                ip: row.ip,
                session_id: row.session_id,
                tuple_level: &row.tuple_level,
                n_candidates: row.n_candidates,
                correct: row.correct,
            })?;
        }
    }
    w.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)? + "\n")?;
    Ok(())
}
