//! Marker-address probes: estimate a server's degree, discover which servers
//! it is connected to, and bound the number of GETADDR polls needed to read
//! out a whole address database.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{Delivery, LinkId, Message, NetsimError, Observer, World, MARKER_BASE};
use crate::protocol::{
    NetAddress, NodeId, Reachability, ADDR_DB_CAPACITY, ADDR_RELAY_MAX_AGE_MS, GETADDR_MAX_REPLY, GETADDR_PERCENT,
    MAX_RELAY_ADDR_COUNT, MS_PER_SEC,
};

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("insufficient signal: no marker came back")]
    InsufficientSignal,
    #[error("degenerate pair: {0:?} probed against itself")]
    DegeneratePair(NodeId),
    #[error("never absorbs: a reply of zero addresses learns nothing")]
    NeverAbsorbs,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Netsim(#[from] NetsimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampPolicy {
    Fresh,
    /// Old enough that the first relay is the last one.
    NearExpiry,
}

/// Fake addresses that belong to no simulated node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkerSet {
    pub first: u64,
    pub count: u64,
    pub reachability: Reachability,
    pub policy: TimestampPolicy,
}

impl MarkerSet {
    /// `count` reachable markers starting at marker number `first`.
    pub fn new(first: u64, count: u64, policy: TimestampPolicy) -> Self {
        MarkerSet { first, count, reachability: Reachability::Reachable, policy }
    }

    pub fn contains(&self, id: NodeId) -> bool {
        (MARKER_BASE + self.first..MARKER_BASE + self.first + self.count).contains(&id.0)
    }

    /// The same number of markers, shifted past this set.
    pub fn next_block(&self) -> MarkerSet {
        MarkerSet { first: self.first + self.count, ..self.clone() }
    }

    /// Addresses stamped for a send at `now_ms`. Near-expiry stamps are two
    /// seconds short of the relay age limit, so with hops of a second or more
    /// the receiver relays once and the next hop drops them.
    pub fn stamped(&self, now_ms: u64) -> Vec<NetAddress> {
        let now_s = now_ms / MS_PER_SEC;
        let ts = match self.policy {
            TimestampPolicy::Fresh => now_s,
            TimestampPolicy::NearExpiry => (now_s + 2).saturating_sub(ADDR_RELAY_MAX_AGE_MS / MS_PER_SEC),
        };
        (0..self.count)
            .map(|i| NetAddress { owner: NodeId(MARKER_BASE + self.first + i), reachability: self.reachability, timestamp: ts })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegreeEstimate {
    pub target: NodeId,
    pub k_hat: f64,
    pub n_markers: u64,
    pub n_listeners: usize,
    /// Markers received over all listeners and repeats.
    pub received: u64,
    /// Per-repeat estimates (NaN where a repeat saw nothing).
    pub per_run: Vec<f64>,
}

/// Counts distinct markers arriving on a set of watched links.
struct Tally<'a> {
    markers: &'a MarkerSet,
    watched: HashSet<LinkId>,
    seen: HashSet<(LinkId, NodeId)>,
}

impl Observer for Tally<'_> {
    fn on_message(&mut self, _: &mut World, d: Delivery<'_>) {
        if !self.watched.contains(&d.link) {
            return;
        }
        if let Message::Addr(addrs) = d.msg {
            for a in addrs {
                if self.markers.contains(a.owner) {
                    self.seen.insert((d.link, a.owner));
                }
            }
        }
    }
}

fn send_markers(world: &mut World, link: LinkId, from: NodeId, markers: &MarkerSet) -> Result<(), ProbeError> {
    if markers.policy == TimestampPolicy::NearExpiry && world.now() < ADDR_RELAY_MAX_AGE_MS {
        // Near-expiry stamps only exist once the clock is past the age limit.
        world.run_until(ADDR_RELAY_MAX_AGE_MS, &mut ());
    }
    let addrs = markers.stamped(world.now());
    for chunk in addrs.chunks(MAX_RELAY_ADDR_COUNT) {
        world.send(link, from, Message::Addr(chunk.to_vec()))?;
    }
    Ok(())
}

/// Runs until `target` has nothing queued on any link, then long enough for
/// the last flush to land.
fn drain(world: &mut World, target: NodeId, obs: &mut impl Observer) {
    let settle = settle_ms(world);
    let t_max = world.now() + 3_600_000;
    // Give the first batch time to arrive before testing for an empty queue.
    world.run_until(world.now() + settle, obs);
    world.run_while(1_000, t_max, obs, |w| {
        let n = w.node(target).expect("target exists");
        n.links().iter().all(|&l| w.pending_on(l, target) == 0)
    });
    world.run_until(world.now() + settle, obs);
}

fn settle_ms(world: &World) -> u64 {
    let lat = world.server_ids().flat_map(|s| world.node(s).expect("server").links().to_vec()).map(|l| world.link(l).latency).max().unwrap_or(0);
    2 * (lat + world.config().delay_model.processing_ms) + 1_000
}

/// Attaches one sender and `listeners` listener links to `target`, pushes
/// `markers` through the sender and counts what comes back to the
/// listeners. Each repeat reconnects (fresh histories and rankings) and
/// shifts to an unused marker block. With `L` listeners the target relays a
/// reachable marker to 2 of its `k + L + 1` links, so a listener receives a
/// fraction `f = 2/(k+L+1)` and `k = 2/f − L − 1` (1 instead of 2 for
/// unreachable markers).
pub fn estimate_degree(
    world: &mut World,
    target: NodeId,
    markers: &MarkerSet,
    listeners: usize,
    repeats: usize,
) -> Result<DegreeEstimate, ProbeError> {
    if listeners == 0 || repeats == 0 || markers.count == 0 {
        return Err(ProbeError::Precondition("need at least one listener, repeat and marker".into()));
    }
    if !world.is_online_server(target) {
        return Err(NetsimError::NotAServer(target).into());
    }
    let fanout = markers.reachability.relay_fanout() as f64;
    let prober = world.add_controlled_node();
    let mut block = markers.clone();
    let mut received = 0u64;
    let mut per_run = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let sender = world.open_link(prober, target)?;
        let mut watched = HashSet::new();
        for _ in 0..listeners {
            watched.insert(world.open_link(prober, target)?);
        }
        send_markers(world, sender, prober, &block)?;
        let mut tally = Tally { markers: &block, watched: watched.clone(), seen: HashSet::new() };
        drain(world, target, &mut tally);
        let got = tally.seen.len() as u64;
        received += got;
        let f = got as f64 / (block.count as f64 * listeners as f64);
        per_run.push(if got > 0 { fanout / f - listeners as f64 - 1.0 } else { f64::NAN });
        world.close_link(sender);
        for l in watched {
            world.close_link(l);
        }
        block = block.next_block();
    }
    if received == 0 {
        return Err(ProbeError::InsufficientSignal);
    }
    let f = received as f64 / (markers.count as f64 * listeners as f64 * repeats as f64);
    Ok(DegreeEstimate {
        target,
        k_hat: fanout / f - listeners as f64 - 1.0,
        n_markers: markers.count,
        n_listeners: listeners,
        received,
        per_run,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    /// Markers for the degree-estimation phase.
    pub degree_markers: u64,
    pub degree_listeners: usize,
    /// Near-expiry markers pushed to the probed node.
    pub markers: u64,
    /// GETADDR polls per candidate.
    pub polls: usize,
    /// Fraction of the expected per-neighbour share needed to call a link.
    pub threshold: f64,
    /// First marker number; the two phases use disjoint blocks above it.
    pub marker_base: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig { degree_markers: 1000, degree_listeners: 3, markers: 2000, polls: 5, threshold: 0.5, marker_base: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeighborReport {
    pub probed: NodeId,
    pub k_hat: f64,
    /// Markers a true neighbour is expected to hold.
    pub expected_share: f64,
    /// (candidate, estimated markers held).
    pub estimates: Vec<(NodeId, f64)>,
    pub neighbors: Vec<NodeId>,
}

/// Markers of `set` a server holds, estimated from `polls` GETADDR replies.
/// Each reply is a uniform sample of 23% of the database (capped at 2500),
/// so the database size is inferred from the reply length.
fn estimate_held(world: &mut World, server: NodeId, set: &MarkerSet, polls: usize) -> Result<f64, ProbeError> {
    let mut total = 0.0;
    for _ in 0..polls {
        let reply = world.getaddr_now(server)?;
        if reply.is_empty() {
            continue;
        }
        let db_len = if reply.len() < GETADDR_MAX_REPLY {
            reply.len() as f64 * 100.0 / GETADDR_PERCENT as f64
        } else {
            ADDR_DB_CAPACITY as f64
        };
        let hits = reply.iter().filter(|a| set.contains(a.owner)).count() as f64;
        total += hits * db_len / reply.len() as f64;
    }
    Ok(total / polls as f64)
}

/// Finds which `candidates` are server neighbours of `a`: estimate `a`'s
/// degree, push near-expiry markers to `a` alone, then poll every candidate
/// with GETADDR and keep those holding at least `threshold` of the share a
/// neighbour should have received.
pub fn enumerate_neighbors(
    world: &mut World,
    a: NodeId,
    candidates: &[NodeId],
    cfg: &DiscoveryConfig,
) -> Result<NeighborReport, ProbeError> {
    if cfg.polls == 0 || cfg.markers == 0 {
        return Err(ProbeError::Precondition("need at least one marker and one poll".into()));
    }
    for &b in candidates {
        if b == a {
            return Err(ProbeError::DegeneratePair(a));
        }
        if !world.is_online_server(b) {
            return Err(NetsimError::NotAServer(b).into());
        }
    }
    let phase1 = MarkerSet::new(cfg.marker_base, cfg.degree_markers, TimestampPolicy::Fresh);
    let k_hat = estimate_degree(world, a, &phase1, cfg.degree_listeners, 1)?.k_hat;

    let phase2 = MarkerSet::new(cfg.marker_base + cfg.degree_markers, cfg.markers, TimestampPolicy::NearExpiry);
    let prober = world.add_controlled_node();
    let sender = world.open_link(prober, a)?;
    send_markers(world, sender, prober, &phase2)?;
    drain(world, a, &mut ());
    world.close_link(sender);

    // `a` relays each marker to 2 of its k+1 links (the sender is ranked but
    // skipped).
    let expected_share = cfg.markers as f64 * phase2.reachability.relay_fanout() as f64 / (k_hat.max(0.0) + 1.0);
    let mut estimates = Vec::with_capacity(candidates.len());
    let mut neighbors = Vec::new();
    for &b in candidates {
        let held = estimate_held(world, b, &phase2, cfg.polls)?;
        if held >= cfg.threshold * expected_share {
            neighbors.push(b);
        }
        estimates.push((b, held));
    }
    neighbors.sort();
    Ok(NeighborReport { probed: a, k_hat, expected_share, estimates, neighbors })
}

/// Whether `a` and `b` are directly connected, by the same procedure.
pub fn discover_connection(world: &mut World, a: NodeId, b: NodeId, cfg: &DiscoveryConfig) -> Result<bool, ProbeError> {
    if a == b {
        return Err(ProbeError::DegeneratePair(a));
    }
    Ok(enumerate_neighbors(world, a, &[b], cfg)?.neighbors.contains(&b))
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n + 1];
    for i in 1..=n {
        t[i] = t[i - 1] + (i as f64).ln();
    }
    t
}

/// Expected number of GETADDR replies, each a uniform sample of `per_reply`
/// distinct entries, before every one of `db_size` entries has been seen.
/// Solves the absorbing chain on the number of entries seen backwards:
/// `E[k] = (1 + Σ_{j≥1} P(k→k+j) E[k+j]) / (1 − P(k→k))`.
pub fn markov_getaddr_expectation(db_size: usize, per_reply: usize) -> Result<f64, ProbeError> {
    if per_reply == 0 {
        return Err(ProbeError::NeverAbsorbs);
    }
    if per_reply > db_size {
        return Err(ProbeError::Precondition(format!("per_reply {per_reply} exceeds db_size {db_size}")));
    }
    let (n, r) = (db_size, per_reply);
    let lf = ln_factorials(n);
    let ln_c = |a: usize, b: usize| lf[a] - lf[b] - lf[a - b];
    let ln_total = ln_c(n, r);
    let mut e = vec![0.0f64; n + 1];
    for k in (0..n).rev() {
        let unseen = n - k;
        let j_min = r.saturating_sub(k);
        let j_max = r.min(unseen);
        let mut stay = 0.0;
        let mut acc = 1.0;
        for j in j_min..=j_max {
            let p = (ln_c(unseen, j) + ln_c(k, r - j) - ln_total).exp();
            if j == 0 {
                stay = p;
            } else {
                acc += p * e[k + j];
            }
        }
        e[k] = acc / (1.0 - stay);
    }
    Ok(e[0])
}

/// Probability that one given entry is still unseen after `rounds` replies.
pub fn getaddr_miss_probability(db_size: usize, per_reply: usize, rounds: u32) -> f64 {
    (1.0 - per_reply as f64 / db_size as f64).powi(rounds as i32)
}
