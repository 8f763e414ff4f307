// End-to-end acceptance checks. Each test prints one PASS/FAIL line straight
// to stderr (bypassing the harness capture) and then asserts.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use gossiplab::altchain::{checkpoint_floor, checkpoint_scenario, plan_alternative_chain, plan_cost, validate_chain};
use gossiplab::analysis::{attack_cost, binomial_spectrum, p_addr, success_probability, CostModelInput, SuccessModelInput};
use gossiplab::netsim::{DelayModel, Delivery, Message, Observer, World, WorldConfig};
use gossiplab::protocol::{
    getaddr_reply_len, is_immediate, responsible_nodes, Connection, NetAddress, NodeId, TxId, MS_PER_DAY,
};
use gossiplab::scenario::{run_scenario, Scenario};
use gossiplab::topology::{
    enumerate_neighbors, estimate_degree, markov_getaddr_expectation, DiscoveryConfig, MarkerSet, TimestampPolicy,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Checks {
    lines: Vec<(bool, String)>,
}

impl Checks {
    fn new() -> Self {
        Checks { lines: Vec::new() }
    }

    fn check(&mut self, ok: bool, what: String) {
        self.lines.push((ok, what));
    }

    fn finish(self, n: u32, title: &str, started: Instant, budget_secs: Option<f64>) {
        let mut lines = self.lines;
        let secs = started.elapsed().as_secs_f64();
        if let Some(b) = budget_secs {
            lines.push((secs < b, format!("runtime {secs:.1}s < {b}s")));
        }
        let ok = lines.iter().all(|l| l.0);
        let detail: Vec<String> = lines.iter().map(|(p, s)| format!("{}{s}", if *p { "" } else { "!! " })).collect();
        let line = format!("criterion {n} [{title}]: {} | {}\n", if ok { "PASS" } else { "FAIL" }, detail.join("; "));
        std::io::stderr().write_all(line.as_bytes()).unwrap();
        assert!(ok, "{line}");
    }
}

fn within(x: f64, target: f64, tol: f64) -> bool {
    (x - target).abs() <= tol
}

#[test]
fn criterion_1_analytical_fidelity() {
    let t = Instant::now();
    let mut c = Checks::new();
    let a = p_addr(50, 100).unwrap();
    c.check(within(a, 0.7525, 5e-5), format!("p_addr(50,100) = {a:.4}"));
    let b = p_addr(90, 125).unwrap();
    c.check(within(b, 0.484, 0.001), format!("p_addr(90,125) = {b:.4}"));
    let p1 = binomial_spectrum(0.34, 8).unwrap()[3];
    c.check(within(p1, 0.2755, 0.005), format!("P1(3;8)@0.34 = {p1:.4}"));
    let input = SuccessModelInput::testnet(0.34);
    for (m, want) in [(1, 0.721), (2, 0.355), (3, 0.112)] {
        let p = success_probability(m, &input).unwrap();
        c.check(within(p, want, 0.01), format!("P_success({m}) = {p:.3} vs {want}"));
    }
    for (pa, want) in [(0.64, 0.43), (0.86, 0.656)] {
        let p = success_probability(3, &SuccessModelInput::testnet(pa)).unwrap();
        c.check(within(p, want, 0.01), format!("testnet rate @p_addr={pa}: {:.1}% vs {:.1}%", p * 100.0, want * 100.0));
    }
    c.finish(1, "analytical fidelity", t, Some(1.0));
}

/// Rounds of `per_reply` distinct uniform draws until all `db` items are seen.
fn getaddr_rounds_mc(db: usize, per_reply: usize, runs: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0u64;
    let mut seen = vec![false; db];
    for _ in 0..runs {
        seen.iter_mut().for_each(|s| *s = false);
        let mut left = db;
        let mut rounds = 0;
        while left > 0 {
            rounds += 1;
            for i in rand::seq::index::sample(&mut rng, db, per_reply) {
                if !seen[i] {
                    seen[i] = true;
                    left -= 1;
                }
            }
        }
        total += rounds;
    }
    total as f64 / runs as f64
}

#[test]
fn criterion_2_markov_getaddr_bound() {
    let t = Instant::now();
    let mut c = Checks::new();
    let e = markov_getaddr_expectation(20480, 2500).unwrap();
    c.check((75.0..=85.0).contains(&e), format!("E[GETADDR](20480, 2500) = {e:.2} in [75, 85]"));
    let exact = markov_getaddr_expectation(20, 5).unwrap();
    let mc = getaddr_rounds_mc(20, 5, 1_000_000, 7);
    c.check((exact - mc).abs() / mc <= 0.01, format!("(20,5): chain {exact:.4} vs Monte-Carlo {mc:.4}"));
    c.finish(2, "markov GETADDR bound", t, Some(30.0));
}

#[test]
fn criterion_3_degree_estimation() {
    let t = Instant::now();
    let mut c = Checks::new();
    const RUNS: u64 = 5;
    for (k, markers, listeners) in [(10usize, 500u64, 2usize), (30, 1000, 3), (70, 1000, 7), (100, 2000, 10)] {
        let mut sum = 0.0;
        for r in 0..RUNS {
            let mut cfg = WorldConfig::new(200, 0, 1000 * k as u64 + r);
            cfg.delay_model = DelayModel::constant(1000);
            let mut w = World::build(cfg).unwrap();
            let target = NodeId(r);
            w.force_server_degree(target, k).unwrap();
            let est = estimate_degree(&mut w, target, &MarkerSet::new(0, markers, TimestampPolicy::Fresh), listeners, 1).unwrap();
            sum += est.k_hat;
        }
        let mean = sum / RUNS as f64;
        c.check(within(mean, k as f64, 0.1 * k as f64), format!("k={k}: mean k_hat {mean:.2} over {RUNS} runs"));
    }
    c.finish(3, "degree estimation", t, Some(120.0));
}

#[test]
fn criterion_4_connection_discovery() {
    let t = Instant::now();
    let mut c = Checks::new();
    let (mut worlds, mut truth_total, mut found, mut fp) = (0, 0usize, 0usize, 0usize);
    for seed in 0..100u64 {
        let servers = 50 + (seed as usize * 37) % 251;
        let mut cfg = WorldConfig::new(servers, 0, seed);
        cfg.delay_model = DelayModel::constant(1000);
        if seed % 3 == 0 {
            cfg.target_mean_degree = Some(24.0);
        }
        let mut w = World::build(cfg).unwrap();
        let a = NodeId(seed % servers as u64);
        let truth: HashSet<NodeId> = w.server_neighbors(a).into_iter().collect();
        let cands: Vec<NodeId> = w.server_ids().filter(|&s| s != a).collect();
        let rep = enumerate_neighbors(&mut w, a, &cands, &DiscoveryConfig::default()).unwrap();
        worlds += 1;
        truth_total += truth.len();
        found += rep.neighbors.iter().filter(|n| truth.contains(n)).count();
        fp += rep.neighbors.iter().filter(|n| !truth.contains(n)).count();
    }
    c.check(worlds >= 100, format!("{worlds} worlds of 50..300 servers"));
    c.check(found == truth_total, format!("recall {found}/{truth_total}"));
    c.check(fp == 0, format!("{fp} false positives"));
    c.finish(4, "connection discovery", t, Some(300.0));
}

fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn criterion_5_testnet_reproduction() {
    let t = Instant::now();
    let mut c = Checks::new();
    let sc = Scenario::load(&scenario_path("testnet_repro.json")).unwrap();
    c.check(
        (230..=250).contains(&sc.world.n_servers) && sc.world.target_mean_degree == Some(30.0) && sc.attacker.m == 50,
        format!("{} servers, degree {:?}, m={}", sc.world.n_servers, sc.world.target_mean_degree, sc.attacker.m),
    );
    let s = run_scenario(&sc, sc.world.seed, sc.replicas, None).unwrap();
    let mean = |k: &str| s.metrics[k].mean;
    let txs: f64 = s.replicas.iter().map(|r| r.report.client_txs as f64).sum::<f64>() / s.replicas.len() as f64;
    c.check(txs >= 400.0, format!("{txs:.0} client txs per replica, {} replicas", s.replicas.len()));
    let e = mean("mean_observed_entries");
    c.check((5.0..=7.0).contains(&e), format!("(a) mean |E'| = {e:.2}"));
    let r = mean("deanon_rate");
    c.check((0.50..=0.70).contains(&r), format!("(b) m=50 rate {:.1}%", r * 100.0));

    let sc20 = Scenario::load(&scenario_path("testnet_repro_m20.json")).unwrap();
    c.check(sc20.attacker.m == 20, format!("m={}", sc20.attacker.m));
    let s20 = run_scenario(&sc20, sc20.world.seed, sc20.replicas, None).unwrap();
    let r20 = s20.metrics["deanon_rate"].mean;
    c.check((0.31..=0.51).contains(&r20), format!("(c) m=20 rate {:.1}%", r20 * 100.0));

    let imm = mean("immediate_ge3");
    let tr = mean("trickled_ge3");
    c.check(imm >= 0.95, format!("(d) immediate >=3 in top-10: {:.1}%", imm * 100.0));
    c.check(tr >= 0.60, format!("(d) trickled >=3 in top-10: {:.1}%", tr * 100.0));
    c.check(s.all_ok && s20.all_ok, "invariants hold".into());
    c.finish(5, "testnet-scale deanonymization", t, None);
}

#[test]
fn criterion_6_alternative_chain() {
    let t = Instant::now();
    let mut c = Checks::new();
    let d = 1.0;
    let (history, rule, now) = checkpoint_scenario(d, 100.0, 134.0);
    let plan = plan_alternative_chain(&history, 25_000, now, &rule).unwrap();
    let tail = plan.blocks.last().unwrap().difficulty;
    let inv = d / tail;
    c.check((27.55..=30.0).contains(&inv), format!("tail difficulty D/{inv:.2}"));
    let cost = plan_cost(&plan, d).unwrap();
    c.check(within(cost, 1397.0, 14.0), format!("cost {cost:.1} D-blocks (~1397)"));
    let now_cost = plan_cost(&plan, 30.0 * d).unwrap();
    c.check(now_cost < 50.0, format!("{now_cost:.1} blocks at current difficulty 30D"));
    let floor = checkpoint_floor(now, &rule).unwrap();
    c.check(tail >= floor, format!("tail respects floor {floor:.5}"));
    let mut all_valid = true;
    for (n, days) in [(25_000u64, 134.0), (4032, 134.0), (10_000, 40.0), (3000, 200.0), (1, 134.0)] {
        let (h, rule, now) = checkpoint_scenario(d, 100.0, days);
        let p = plan_alternative_chain(&h, n, now, &rule).unwrap();
        let mut full = h[..h.len() - 1].to_vec();
        full.extend_from_slice(&p.blocks);
        all_valid &= validate_chain(&full, &rule, now).is_ok();
    }
    c.check(all_valid, "every emitted plan validates".into());
    c.finish(6, "alternative-chain planner", t, Some(1.0));
}

/// Counts ADDR entries per (link, address, day) arriving at controlled nodes.
#[derive(Default)]
struct AddrCounter {
    seen: HashMap<(usize, NodeId, u64), u32>,
}

impl Observer for AddrCounter {
    fn on_message(&mut self, _w: &mut World, d: Delivery<'_>) {
        if let Message::Addr(addrs) = d.msg {
            for a in addrs {
                *self.seen.entry((d.link, a.owner, d.at / MS_PER_DAY)).or_default() += 1;
            }
        }
    }
}

fn summary_digest(seed: u64) -> Vec<String> {
    let mut world = WorldConfig::new(40, 8, 0);
    world.delay_model = DelayModel::constant(80);
    let sc: Scenario = serde_json::from_value(serde_json::json!({
        "name": "determinism",
        "world": world,
        "attacker": { "m": 8 },
        "schedule": { "generated": {
            "sessions_per_client": 1, "total_txs": 20, "session_secs": 1800.0, "gap_secs": 0.0,
            "start_window_secs": 1200.0, "tx_lead_secs": 30.0, "tx_window_secs": 1200.0
        }},
        "replicas": 2
    }))
    .unwrap();
    let s = run_scenario(&sc, seed, 2, None).unwrap();
    s.replicas.iter().map(|r| r.digest.clone()).collect()
}

#[test]
fn criterion_7_protocol_properties() {
    let t = Instant::now();
    let mut c = Checks::new();

    // Forward-once: run a churning world with listeners on every server,
    // across a day boundary.
    let mut cfg = WorldConfig::new(60, 40, 11);
    cfg.delay_model = DelayModel::constant(150);
    cfg.churn_model.client_arrivals_per_hour = 120.0;
    let mut w = World::build(cfg).unwrap();
    let servers: Vec<NodeId> = w.server_ids().collect();
    for _ in 0..3 {
        let ctl = w.add_controlled_node();
        for &s in &servers {
            w.open_link(ctl, s).unwrap();
        }
    }
    let mut obs = AddrCounter::default();
    w.run_until(MS_PER_DAY + 3 * 3_600_000, &mut obs);
    let dup = obs.seen.values().filter(|&&n| n > 1).count();
    let days: HashSet<u64> = obs.seen.keys().map(|k| k.2).collect();
    c.check(dup == 0 && !obs.seen.is_empty(), format!("forward-once: {} (link,addr,day) keys, {dup} repeats", obs.seen.len()));
    c.check(days.len() == 2, format!("traffic observed on {} days", days.len()));
    let mut conn = Connection::new(NodeId(1), NodeId(2), 5, 0);
    let once = conn.mark_addr(NodeId(9), 1000) && !conn.mark_addr(NodeId(9), MS_PER_DAY - 1) && conn.mark_addr(NodeId(9), MS_PER_DAY);
    c.check(once, "history resets exactly at the day boundary".into());

    // Immediate fraction.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 100_000u64;
    let hits = (0..n).filter(|_| is_immediate(TxId(rng.random()), rng.random())).count() as f64;
    let f = hits / n as f64;
    let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
    c.check(within(f, 0.25, 4.0 * sigma), format!("immediate fraction {f:.4} (4 sigma = {:.4})", 4.0 * sigma));

    // Responsible nodes: fixed within a day, reshuffled across days.
    let conns: Vec<Connection> = (0..40).map(|i| Connection::new(NodeId(0), NodeId(i + 1), rng.random(), 0)).collect();
    let (mut stable, mut moved) = (true, 0);
    for owner in 0..500u64 {
        let a = NetAddress::reachable(NodeId(10_000 + owner), 0);
        let d0 = responsible_nodes(&a, &conns, 77, 0);
        stable &= (1..24).all(|h| responsible_nodes(&a, &conns, 77, (h * 3_600_000) / MS_PER_DAY) == d0);
        if responsible_nodes(&a, &conns, 77, 1) != d0 {
            moved += 1;
        }
    }
    c.check(stable, "responsible pair stable over 24 h".into());
    c.check(moved > 400, format!("{moved}/500 pairs change on the next day"));

    // GETADDR sizing.
    let cases = [(0, 0), (2, 0), (3, 1), (100, 23), (10_867, 2499), (10_871, 2500), (10_872, 2500), (20_480, 2500)];
    let bad: Vec<_> = cases.iter().filter(|(n, want)| getaddr_reply_len(*n) != *want).collect();
    c.check(bad.is_empty(), format!("GETADDR 23%/2500 boundaries ({} mismatches)", bad.len()));

    // Determinism.
    let (a, b) = (summary_digest(5), summary_digest(5));
    c.check(a == b, format!("same seed, same digests {a:?}"));
    c.check(a != summary_digest(6), "different seed, different digests".into());
    c.finish(7, "protocol properties", t, None);
}

#[test]
fn criterion_8_cost_model() {
    let t = Instant::now();
    let mut c = Checks::new();
    let r = attack_cost(&CostModelInput::default()).unwrap();
    let per_round = (r.traffic_gb_per_period * 10.0).round() / 10.0;
    c.check(per_round == 24.2, format!("{:.3} GB per round", r.traffic_gb_per_period));
    let month_stated = per_round * r.rounds_per_month as f64;
    c.check(within(month_stated, 104_544.0, 1e-6), format!("{month_stated:.0} GB/month from the rounded per-round figure"));
    c.check(
        (r.traffic_gb_per_month / 104_544.0 - 1.0).abs() < 1e-3,
        format!("{:.0} GB/month unrounded", r.traffic_gb_per_month),
    );
    c.finish(8, "cost model", t, Some(1.0));
}
