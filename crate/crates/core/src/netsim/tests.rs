use super::*;
use crate::protocol::MS_PER_SEC;

fn cfg(s: usize, c: usize, seed: u64) -> WorldConfig {
    let mut c = WorldConfig::new(s, c, seed);
    c.delay_model = DelayModel::constant(50);
    c
}

#[derive(Default)]
struct Sink(Vec<(Millis, NodeId, Message)>);

impl Observer for Sink {
    fn on_message(&mut self, _w: &mut World, d: Delivery<'_>) {
        self.0.push((d.at, d.from, d.msg.clone()));
    }
}

#[test]
fn built_world_meets_degree_floor_and_is_connected() {
    let w = World::build(cfg(250, 20, 1)).unwrap();
    for s in w.server_ids() {
        assert!(w.node(s).unwrap().degree() >= 8, "{s:?}");
    }
    assert!(w.servers_connected());
    assert!(w.check_invariants().is_ok());
    assert!(w.client_ids().all(|c| w.node(c).unwrap().degree() == 0));
}

#[test]
fn too_few_servers_is_infeasible() {
    assert!(matches!(World::build(cfg(8, 0, 1)), Err(NetsimError::Infeasible(_))));
}

#[test]
fn target_mean_degree_is_reached() {
    let mut c = cfg(250, 0, 3);
    c.target_mean_degree = Some(30.0);
    let w = World::build(c).unwrap();
    let d = w.mean_server_degree();
    assert!((30.0..30.1).contains(&d), "{d}");
}

#[test]
fn same_seed_same_world() {
    let a = World::build(cfg(100, 10, 7)).unwrap();
    let b = World::build(cfg(100, 10, 7)).unwrap();
    let sa = serde_json::to_string(&a.snapshot()).unwrap();
    let sb = serde_json::to_string(&b.snapshot()).unwrap();
    assert_eq!(sa, sb);
    let c = World::build(cfg(100, 10, 8)).unwrap();
    assert_ne!(sa, serde_json::to_string(&c.snapshot()).unwrap());
}

#[test]
fn fresh_client_gets_eight_distinct_entries() {
    let mut w = World::build(cfg(50, 5, 2)).unwrap();
    let c = w.client_ids().next().unwrap();
    let fp = w.client_connect(c).unwrap();
    assert_eq!(fp.entries.len(), 8);
    assert!(!fp.degraded);
    let mut e = fp.entries.clone();
    e.dedup();
    assert_eq!(e.len(), 8);
    assert!(e.iter().all(|s| w.is_server(*s)));
    assert_eq!(w.client_connect(c), Err(NetsimError::ClientOnline));
}

#[test]
fn saturated_servers_give_degraded_fingerprint() {
    let mut c = cfg(20, 1, 4);
    c.max_connections_per_server = 30;
    let mut w = World::build(c).unwrap();
    let filler = w.add_controlled_node();
    for s in w.server_ids().collect::<Vec<_>>() {
        while w.open_link(filler, s).is_ok() {}
        assert_eq!(w.open_link(filler, s), Err(NetsimError::NoFreeSlot(s)));
    }
    let client = w.client_ids().next().unwrap();
    let fp = w.client_connect(client).unwrap();
    assert!(fp.degraded);
    assert!(fp.entries.is_empty());
}

#[test]
fn clients_behind_one_nat_get_distinct_fingerprints() {
    for seed in 0..100 {
        let mut c = cfg(250, 2, seed);
        c.clients_per_nat = 2;
        let mut w = World::build(c).unwrap();
        let ids: Vec<NodeId> = w.client_ids().collect();
        assert_eq!(w.node(ids[0]).unwrap().public_addr, w.node(ids[1]).unwrap().public_addr);
        let a = w.client_connect(ids[0]).unwrap();
        let b = w.client_connect(ids[1]).unwrap();
        assert_ne!(a.entries, b.entries, "seed {seed}");
    }
}

fn immediate_tx_world(seed: u64) -> (World, NodeId, TxId, EntryFingerprint) {
    let mut w = World::build(cfg(30, 1, seed)).unwrap();
    let c = w.client_ids().next().unwrap();
    let fp = w.client_connect(c).unwrap();
    w.run_until(10 * MS_PER_SEC, &mut ());
    loop {
        let tx = w.generate_tx(c).unwrap();
        if w.txs.last().unwrap().immediate {
            return (w, c, tx, fp);
        }
    }
}

#[test]
fn immediate_tx_reaches_all_entries_after_one_hop() {
    let (mut w, c, tx, fp) = immediate_tx_world(5);
    let t0 = w.now();
    w.run_until(t0 + 49, &mut ());
    for &s in &fp.entries {
        let l = *w.node(c).unwrap().links().iter().find(|&&l| w.link(l).other(c) == s).unwrap();
        assert!(!w.link(l).end(s).knows_tx(tx, w.now()));
    }
    w.run_until(t0 + 50, &mut ());
    for &s in &fp.entries {
        let l = *w.node(c).unwrap().links().iter().find(|&&l| w.link(l).other(c) == s).unwrap();
        assert!(w.link(l).end(s).knows_tx(tx, w.now()), "entry {s:?} has no INV");
    }
}

#[test]
fn queued_addr_waits_for_trickle() {
    let mut w = World::build(cfg(30, 0, 6)).unwrap();
    let me = w.add_controlled_node();
    let s = NodeId(0);
    let l = w.open_link(me, s).unwrap();
    let addr = NetAddress::reachable(NodeId(MARKER_BASE + 1), 0);
    w.send(l, me, Message::Addr(vec![addr])).unwrap();
    // Delivered at 50 ms; the first trickle tick is strictly later.
    w.run_until(50, &mut ());
    let holders = w.server_ids().filter(|&x| x != s && w.node(x).unwrap().db.contains(addr.owner)).count();
    assert_eq!(holders, 0);
    w.run_until(60 * MS_PER_SEC, &mut ());
    let holders = w.server_ids().filter(|&x| x != s && w.node(x).unwrap().db.contains(addr.owner)).count();
    assert!(holders >= 2);
}

fn scripted_run(seed: u64) -> (u64, usize) {
    let mut c = cfg(60, 10, seed);
    c.delay_model = DelayModel::default();
    let mut w = World::build(c).unwrap();
    let clients: Vec<NodeId> = w.client_ids().collect();
    for (i, &cl) in clients.iter().enumerate() {
        w.schedule_session(cl, i as u64 * 1000, Some(600_000)).unwrap();
        w.schedule_tx(cl, 30_000 + i as u64 * 5000).unwrap();
    }
    w.run_until(700_000, &mut ());
    (w.digest(), w.log().len())
}

#[test]
fn replay_is_deterministic() {
    assert_eq!(scripted_run(11), scripted_run(11));
    assert_ne!(scripted_run(11).0, scripted_run(12).0);
}

#[test]
fn flood_reaches_every_server() {
    let mut c = cfg(120, 3, 9);
    c.delay_model = DelayModel::default();
    let mut w = World::build(c).unwrap();
    let clients: Vec<NodeId> = w.client_ids().collect();
    let mut txs = Vec::new();
    for &cl in &clients {
        w.client_connect(cl).unwrap();
        for _ in 0..4 {
            txs.push(w.generate_tx(cl).unwrap());
        }
    }
    w.run_until(600 * MS_PER_SEC, &mut ());
    for tx in txs {
        let reach = w.server_ids().filter(|&s| w.knows_tx(s, tx)).count();
        assert_eq!(reach, 120, "{tx:?}");
    }
    assert!(w.check_invariants().is_ok());
}

#[test]
fn churned_world_keeps_connection_invariants() {
    let mut c = cfg(80, 40, 10);
    c.churn_model = ChurnModel {
        client_arrivals_per_hour: 200.0,
        session: SessionDist::Exponential { mean_s: 900.0 },
        disconnect_curve: vec![(600, 0.1), (3600, 0.4), (7200, 0.6)],
    };
    let mut w = World::build(c).unwrap();
    for step in 1..=36 {
        w.run_until(step * 200 * MS_PER_SEC, &mut ());
        w.check_invariants().unwrap();
    }
    assert!(!w.connects.is_empty());
    assert!(!w.entry_changes.is_empty());
    for r in &w.connects {
        assert!(r.entries.len() <= 8);
    }
}

#[test]
fn tor_ban_semantics() {
    let mut c = cfg(40, 2, 12);
    c.proxy_fraction = 1.0;
    let mut w = World::build(c.clone()).unwrap();
    assert_eq!(w.apply_tor_ban(&[]), Err(NetsimError::TorBanDisabled));

    c.tor_ban_enabled = true;
    let mut w2 = World::build(c).unwrap();
    let before = w2.snapshot();
    w2.apply_tor_ban(&[]).unwrap();
    assert_eq!(before, w2.snapshot());

    let ids: Vec<NodeId> = w2.client_ids().collect();
    w2.client_connect(ids[0]).unwrap();
    assert_eq!(w2.connects[0].advertised, None);

    let all: Vec<NodeId> = w2.server_ids().collect();
    w2.apply_tor_ban(&all).unwrap();
    w2.client_connect(ids[1]).unwrap();
    let truth = w2.node(ids[1]).unwrap().public_addr;
    assert_eq!(w2.connects[1].advertised, Some(truth));

    w2.client_disconnect(ids[1]).unwrap();
    w2.run_until(MS_PER_DAY, &mut ());
    w2.client_connect(ids[1]).unwrap();
    assert_eq!(w2.connects[2].advertised, None);
}

#[test]
fn getaddr_message_answered_by_server() {
    let mut w = World::build(cfg(30, 0, 13)).unwrap();
    let me = w.add_controlled_node();
    let l = w.open_link(me, NodeId(3)).unwrap();
    w.send(l, me, Message::GetAddr).unwrap();
    let mut sink = Sink::default();
    w.run_until(1_000, &mut sink);
    let got: usize = sink
        .0
        .iter()
        .map(|(_, _, m)| if let Message::Addr(a) = m { a.len() } else { 0 })
        .sum();
    let db = w.node(NodeId(3)).unwrap().db.len();
    assert_eq!(got, crate::protocol::getaddr_reply_len(db));
}

/// Client A -> server B -> observer C with 1 ms links. For a transaction that
/// neither A nor B announces immediately, C hears the INV on B's trickle grid
/// after a geometric number of rounds (B picks between A and C).
#[test]
fn trickle_rounds_match_two_stage_oracle() {
    const RUNS: u64 = 10_000;
    let mut hist = [0u64; 12];
    let mut used = 0u64;
    for seed in 0..RUNS * 4 {
        if used == RUNS {
            break;
        }
        let mut c = WorldConfig::new(2, 1, seed);
        c.outgoing_per_peer = 1;
        c.delay_model = DelayModel::constant(0);
        let mut w = World::build_with_edges(c, &[]).unwrap();
        let a = w.client_ids().next().unwrap();
        let b = NodeId(0);
        w.open_link(a, b).unwrap();
        w.client_connect(a).unwrap();
        let obs = w.add_controlled_node();
        w.open_link(obs, b).unwrap();
        w.run_until(5_000, &mut ());
        let tx = w.generate_tx(a).unwrap();
        let salt_b = w.node(b).unwrap().salt;
        if w.txs[0].immediate || is_immediate(tx, salt_b) {
            continue;
        }
        used += 1;
        let t0 = w.now();
        let mut sink = Sink::default();
        w.run_until(t0 + 60_000, &mut sink);
        let at = sink
            .0
            .iter()
            .find(|(_, _, m)| matches!(m, Message::Inv(v) if v.contains(&tx)))
            .map(|x| x.0)
            .expect("inv reached observer");
        // B learns the tx 3 ms after A's first tick (INV, GETDATA, TX).
        let phase_a = w.node(a).unwrap().tick_phase();
        let phase_b = w.node(b).unwrap().tick_phase();
        let first_tick = |now: Millis, ph: Millis| {
            let base = now - now % 100 + ph;
            if base > now {
                base
            } else {
                base + 100
            }
        };
        let t_b = first_tick(t0, phase_a) + 3;
        let sent = at - 1;
        assert_eq!((sent - phase_b) % 100, 0, "INV not sent on B's grid");
        let rounds = ((sent - first_tick(t_b, phase_b)) / 100 + 1) as usize;
        hist[rounds.min(11)] += 1;
    }
    assert_eq!(used, RUNS);

    // Brute-force oracle: uniform pick between two neighbours until C.
    let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let mut oracle = [0u64; 12];
    for _ in 0..1_000_000 {
        let mut r = 1;
        while rng.random_range(0..2) != 1 {
            r += 1;
        }
        oracle[r.min(11)] += 1;
    }
    for r in 1..6 {
        let p_sim = hist[r] as f64 / RUNS as f64;
        let p_or = oracle[r] as f64 / 1e6;
        let sigma = (p_or * (1.0 - p_or) / RUNS as f64).sqrt();
        assert!((p_sim - p_or).abs() <= 4.0 * sigma + 1e-3, "round {r}: {p_sim} vs {p_or}");
    }
}

#[test]
fn near_expiry_addresses_stop_after_one_hop() {
    // Line: observer -> s0 -> s1 -> observer, 1 s links: the first hop
    // arrives inside the ten-minute window, the second outside it.
    let mut c = cfg(3, 0, 14);
    c.delay_model = DelayModel::constant(1000);
    c.outgoing_per_peer = 1;
    let mut w = World::build_with_edges(c, &[(0, 1)]).unwrap();
    let me = w.add_controlled_node();
    let tx_link = w.open_link(me, NodeId(0)).unwrap();
    w.open_link(me, NodeId(1)).unwrap();
    w.run_until(1_000_000, &mut ());
    let now_s = w.now() / MS_PER_SEC;
    let batch: Vec<NetAddress> = (0..10).map(|i| NetAddress::reachable(NodeId(MARKER_BASE + i), now_s - 598)).collect();
    w.send(tx_link, me, Message::Addr(batch)).unwrap();
    let mut sink = Sink::default();
    w.run_until(w.now() + 120_000, &mut sink);
    // s0 relays to its two responsible links (the origin among them is
    // skipped); s1 gets them too late to relay further.
    assert!(w.node(NodeId(1)).unwrap().db.contains(NodeId(MARKER_BASE)));
    let second_hop = sink.0.iter().filter(|(_, from, _)| *from == NodeId(1)).count();
    assert_eq!(second_hop, 0);
}
