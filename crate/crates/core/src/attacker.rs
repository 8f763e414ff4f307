//! The deanonymization pipeline: enumerate servers, hold many connections to
//! each, learn every client's entry nodes from how its address is relayed,
//! and match the first relayers of each transaction against those
//! fingerprints.
//!
//! Address rebroadcasts pre-load each server's non-attacker responsible links
//! with the candidate addresses while the listener links are down. When a
//! client later connects, its entry nodes can then only relay its address to
//! the (freshly reconnected) attacker listeners, so relays of the client's
//! own advertisement come from entry nodes alone.

use std::collections::{BTreeSet, HashMap, HashSet};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netsim::{Delivery, LinkId, Message, NetsimError, Observer, World};
use crate::protocol::{
    Millis, NetAddress, NodeId, TxId, ADDR_RELAY_MAX_AGE_MS, GETADDR_MAX_REPLY, GETADDR_PERCENT, MAX_RELAY_ADDR_COUNT,
    MS_PER_SEC,
};
use crate::topology::markov_getaddr_expectation;

/// Scheduled-action tags understood by [`Attacker`].
pub const TAG_REBROADCAST: u64 = 0xA77A_0001;
pub const TAG_RECONNECT: u64 = 0xA77A_0002;

/// Candidate stamps sit this far inside the relay age limit on arrival.
const STAMP_SLACK_SECS: u64 = 2;

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("invalid attacker config: {0}")]
    InvalidConfig(String),
    #[error("no seed server is online")]
    NoSeed,
    #[error("near-expiry stamps need the clock past {min_ms} ms (now {now_ms})")]
    TooEarly { now_ms: Millis, min_ms: Millis },
    #[error(transparent)]
    Netsim(#[from] NetsimError),
}

fn default_m() -> usize {
    50
}
fn default_q() -> usize {
    10
}
fn default_period() -> u64 {
    600
}
fn default_stealth() -> usize {
    1
}
fn default_idle() -> u64 {
    7200
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackerConfig {
    /// Connections per server, the broadcast link included.
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_q")]
    pub q: usize,
    #[serde(default = "default_period")]
    pub rebroadcast_period_secs: u64,
    /// Addresses under investigation (owners).
    #[serde(default)]
    pub candidate_addresses: Vec<NodeId>,
    /// Distinct attacker endpoints the connections are spread over.
    #[serde(default = "default_stealth")]
    pub stealth_ip_count: usize,
    /// A fingerprint stops matching this long after its last sighting.
    #[serde(default = "default_idle")]
    pub idle_timeout_secs: u64,
    /// Count relaying servers once in a top-q list (otherwise every relaying
    /// connection counts).
    #[serde(default = "default_true")]
    pub dedup_by_server: bool,
}

impl Default for AttackerConfig {
    fn default() -> Self {
        AttackerConfig {
            m: default_m(),
            q: default_q(),
            rebroadcast_period_secs: default_period(),
            candidate_addresses: Vec::new(),
            stealth_ip_count: default_stealth(),
            idle_timeout_secs: default_idle(),
            dedup_by_server: true,
        }
    }
}

impl AttackerConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |s: &str| Err(AttackError::InvalidConfig(s.into()));
        if self.m < 1 {
            return bad("m must be >= 1");
        }
        if self.q < 1 {
            return bad("q must be >= 1");
        }
        if self.rebroadcast_period_secs == 0 {
            return bad("rebroadcast_period_secs must be > 0");
        }
        if self.stealth_ip_count < 1 {
            return bad("stealth_ip_count must be >= 1");
        }
        Ok(())
    }
}

/// A client's entry nodes as seen by the attacker, keyed by the address and
/// the timestamp of the advertisement that revealed them.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LearnedFingerprint {
    pub client_addr: NodeId,
    pub session_id: u64,
    pub observed_entries: BTreeSet<NodeId>,
    pub first_seen: Millis,
    pub last_seen: Millis,
}

impl LearnedFingerprint {
    pub fn key(&self) -> FingerprintKey {
        FingerprintKey { addr: self.client_addr, session_id: self.session_id }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FingerprintKey {
    pub addr: NodeId,
    pub session_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TxSighting {
    pub tx: TxId,
    /// First relaying servers, in order of first relay.
    pub top_q: Vec<NodeId>,
    pub times: Vec<Millis>,
    #[serde(skip)]
    links: Vec<LinkId>,
}

impl TxSighting {
    pub fn new(tx: TxId, top_q: Vec<NodeId>, times: Vec<Millis>) -> Self {
        TxSighting { tx, top_q, times, links: Vec::new() }
    }

    pub fn first_seen(&self) -> Millis {
        self.times.first().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TupleLevel {
    Three,
    Two,
    One,
}

impl TupleLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            TupleLevel::Three => "three",
            TupleLevel::Two => "two",
            TupleLevel::One => "one",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeanonRecord {
    pub tx: TxId,
    pub ip: NodeId,
    pub session_id: u64,
    pub tuple_level: TupleLevel,
    /// Best first: most shared servers, then most recent fingerprint.
    pub candidates: Vec<FingerprintKey>,
    /// Servers shared by the best candidate and the top-q list.
    pub overlap: usize,
}

/// Tuple matching of one sighting. A shared 3-subset exists iff the overlap
/// is at least 3, so levels are decided on `|E′ ∩ top_q|`.
pub fn match_sighting(sighting: &TxSighting, fingerprints: &[&LearnedFingerprint]) -> Option<DeanonRecord> {
    let top: HashSet<NodeId> = sighting.top_q.iter().copied().collect();
    let mut scored: Vec<(usize, &LearnedFingerprint)> = fingerprints
        .iter()
        .map(|f| (f.observed_entries.iter().filter(|s| top.contains(s)).count(), *f))
        .filter(|(o, _)| *o > 0)
        .collect();
    let best = scored.iter().map(|s| s.0).max()?;
    let (level, floor) = match best {
        3.. => (TupleLevel::Three, 3),
        2 => (TupleLevel::Two, 2),
        _ => (TupleLevel::One, 1),
    };
    scored.retain(|s| s.0 >= floor);
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.first_seen.cmp(&a.1.first_seen)).then(a.1.key().cmp(&b.1.key())));
    let head = scored[0].1;
    Some(DeanonRecord {
        tx: sighting.tx,
        ip: head.client_addr,
        session_id: head.session_id,
        tuple_level: level,
        candidates: scored.iter().map(|s| s.1.key()).collect(),
        overlap: scored[0].0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionCluster {
    pub ip: NodeId,
    pub session_id: u64,
    pub txs: Vec<TxId>,
}

/// Groups unambiguous three-level records by fingerprint.
pub fn link_sessions(records: &[DeanonRecord]) -> Vec<SessionCluster> {
    let mut by: IndexMap<(NodeId, u64), Vec<TxId>> = IndexMap::new();
    for r in records.iter().filter(|r| r.tuple_level == TupleLevel::Three && r.candidates.len() == 1) {
        by.entry((r.ip, r.session_id)).or_default().push(r.tx);
    }
    by.into_iter().map(|((ip, session_id), txs)| SessionCluster { ip, session_id, txs }).collect()
}

/// Servers reachable from `seeds` by repeatedly asking for addresses and
/// checking that advertised servers are alive. Each server is polled about
/// twice the expected number of replies needed to see its whole database.
pub fn enumerate_servers(world: &mut World, seeds: &[NodeId]) -> Result<Vec<NodeId>, AttackError> {
    let mut frontier: Vec<NodeId> = seeds.iter().copied().filter(|&s| world.is_online_server(s)).collect();
    if frontier.is_empty() {
        return Err(AttackError::NoSeed);
    }
    let mut found: BTreeSet<NodeId> = frontier.iter().copied().collect();
    let mut polls_cache: HashMap<(usize, usize), usize> = HashMap::new();
    while let Some(s) = frontier.pop() {
        let first = world.getaddr_now(s)?;
        if first.is_empty() {
            continue;
        }
        let reply = first.len();
        let db = if reply < GETADDR_MAX_REPLY { (reply * 100).div_ceil(GETADDR_PERCENT).max(reply) } else { crate::protocol::ADDR_DB_CAPACITY };
        let polls = *polls_cache.entry((db, reply)).or_insert_with(|| {
            markov_getaddr_expectation(db, reply.min(db)).map(|e| (2.0 * e).ceil() as usize).unwrap_or(1)
        });
        let mut seen: Vec<NetAddress> = first;
        for _ in 1..polls {
            seen.extend(world.getaddr_now(s)?);
        }
        for a in seen {
            if !found.contains(&a.owner) && world.is_online_server(a.owner) {
                found.insert(a.owner);
                frontier.push(a.owner);
            }
        }
    }
    Ok(found.into_iter().collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ServerLinks {
    pub broadcast: Option<LinkId>,
    pub listeners: Vec<LinkId>,
    /// Connections obtained (m_i), the broadcast link included.
    pub achieved: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AttackerStats {
    pub rebroadcasts: u64,
    pub addr_messages_sent: u64,
    pub reconnect_shortfall: u64,
    pub echoes_ignored: u64,
}

/// Attacker state; drive it by passing it as the world's observer.
#[derive(Debug)]
pub struct Attacker {
    cfg: AttackerConfig,
    endpoints: Vec<NodeId>,
    links: IndexMap<NodeId, ServerLinks>,
    link_server: HashMap<LinkId, NodeId>,
    candidates: HashSet<NodeId>,
    /// Candidate stamps used by rebroadcasts, with the broadcast time.
    echo_stamps: HashMap<u64, Millis>,
    fingerprints: IndexMap<FingerprintKey, LearnedFingerprint>,
    sightings: IndexMap<TxId, TxSighting>,
    pub stats: AttackerStats,
}

impl Attacker {
    pub fn new(cfg: AttackerConfig) -> Result<Self, AttackError> {
        cfg.validate()?;
        let candidates = cfg.candidate_addresses.iter().copied().collect();
        Ok(Attacker {
            cfg,
            endpoints: Vec::new(),
            links: IndexMap::new(),
            link_server: HashMap::new(),
            candidates,
            echo_stamps: HashMap::new(),
            fingerprints: IndexMap::new(),
            sightings: IndexMap::new(),
            stats: AttackerStats::default(),
        })
    }

    pub fn config(&self) -> &AttackerConfig {
        &self.cfg
    }

    pub fn server_links(&self) -> &IndexMap<NodeId, ServerLinks> {
        &self.links
    }

    pub fn fingerprints(&self) -> impl Iterator<Item = &LearnedFingerprint> {
        self.fingerprints.values()
    }

    pub fn sightings(&self) -> impl Iterator<Item = &TxSighting> {
        self.sightings.values()
    }

    /// Opens up to `m` connections to each server, as many as its free slots
    /// allow. The first is the persistent broadcast link.
    pub fn establish_listeners(&mut self, world: &mut World, servers: &[NodeId]) -> Result<usize, AttackError> {
        while self.endpoints.len() < self.cfg.stealth_ip_count {
            self.endpoints.push(world.add_controlled_node());
        }
        let cap = world.config().max_connections_per_server;
        let mut total = 0;
        for (i, &s) in servers.iter().enumerate() {
            let node = world.node(s).ok_or(NetsimError::UnknownNode(s))?;
            let free = cap.saturating_sub(node.degree());
            let want = self.cfg.m.min(free);
            let mut entry = ServerLinks::default();
            for j in 0..want {
                let from = self.endpoints[(i + j) % self.endpoints.len()];
                match world.open_link(from, s) {
                    Ok(l) => {
                        self.link_server.insert(l, s);
                        if entry.broadcast.is_none() {
                            entry.broadcast = Some(l);
                        } else {
                            entry.listeners.push(l);
                        }
                        entry.achieved += 1;
                    }
                    Err(NetsimError::NoFreeSlot(_)) => break,
                    Err(e) => return Err(e.into()),
                }
            }
            total += entry.achieved;
            self.links.insert(s, entry);
        }
        Ok(total)
    }

    /// Starts the rebroadcast cycle at `at`, or once the clock is past the
    /// relay age limit if that is later.
    pub fn schedule(&self, world: &mut World, at: Millis) {
        world.schedule_action(at.max(ADDR_RELAY_MAX_AGE_MS), TAG_REBROADCAST);
    }

    /// Drops the listeners, sends every candidate to every server over the
    /// broadcast links stamped just inside the relay age limit, and books the
    /// listener reconnect for the moment no server can relay those copies
    /// any more. Returns the number of ADDR messages sent.
    pub fn rebroadcast_candidates(&mut self, world: &mut World) -> Result<u64, AttackError> {
        let now = world.now();
        if now < ADDR_RELAY_MAX_AGE_MS {
            return Err(AttackError::TooEarly { now_ms: now, min_ms: ADDR_RELAY_MAX_AGE_MS });
        }
        let proc_ms = world.config().delay_model.processing_ms;
        let mut cand: Vec<NodeId> = self.candidates.iter().copied().collect();
        cand.sort();
        let mut sent = 0;
        let mut last_stamp = None;
        for (&s, sl) in self.links.iter_mut() {
            for l in sl.listeners.drain(..) {
                world.close_link(l);
                self.link_server.remove(&l);
            }
            let Some(b) = sl.broadcast else { continue };
            if !world.link(b).open || cand.is_empty() {
                continue;
            }
            let arrival = now + world.link(b).latency + proc_ms;
            let stamp = (arrival / MS_PER_SEC + STAMP_SLACK_SECS).saturating_sub(ADDR_RELAY_MAX_AGE_MS / MS_PER_SEC);
            self.echo_stamps.insert(stamp, now);
            last_stamp = last_stamp.max(Some(stamp));
            let addrs: Vec<NetAddress> = cand.iter().map(|&c| NetAddress::reachable(c, stamp)).collect();
            for chunk in addrs.chunks(MAX_RELAY_ADDR_COUNT) {
                world.send(b, world.link(b).other(s), Message::Addr(chunk.to_vec()))?;
                sent += 1;
            }
        }
        let reopen = match last_stamp {
            Some(ts) => ((ts * MS_PER_SEC + ADDR_RELAY_MAX_AGE_MS) + 1).max(now + 1),
            None => now + 1,
        };
        world.schedule_action(reopen, TAG_RECONNECT);
        self.stats.rebroadcasts += 1;
        self.stats.addr_messages_sent += sent;
        Ok(sent)
    }

    fn reconnect_listeners(&mut self, world: &mut World) {
        let n_end = self.endpoints.len();
        for (i, (&s, sl)) in self.links.iter_mut().enumerate() {
            let want = sl.achieved.saturating_sub(1);
            for j in sl.listeners.len()..want {
                let from = self.endpoints[(i + j + 1) % n_end];
                match world.open_link(from, s) {
                    Ok(l) => {
                        self.link_server.insert(l, s);
                        sl.listeners.push(l);
                    }
                    Err(_) => self.stats.reconnect_shortfall += 1,
                }
            }
        }
    }

    fn on_addr(&mut self, at: Millis, server: NodeId, addrs: &[NetAddress]) {
        for a in addrs {
            if !self.candidates.contains(&a.owner) {
                continue;
            }
            if self.echo_stamps.get(&a.timestamp).is_some_and(|&sent| at >= sent) {
                self.stats.echoes_ignored += 1;
                continue;
            }
            let key = FingerprintKey { addr: a.owner, session_id: a.timestamp };
            let f = self.fingerprints.entry(key).or_insert_with(|| LearnedFingerprint {
                client_addr: a.owner,
                session_id: a.timestamp,
                observed_entries: BTreeSet::new(),
                first_seen: at,
                last_seen: at,
            });
            f.observed_entries.insert(server);
            f.last_seen = at;
        }
    }

    fn on_inv(&mut self, at: Millis, link: LinkId, server: NodeId, txs: &[TxId]) {
        let q = self.cfg.q;
        for &tx in txs {
            let s = self.sightings.entry(tx).or_insert_with(|| TxSighting::new(tx, Vec::new(), Vec::new()));
            if s.top_q.len() >= q {
                continue;
            }
            let fresh = if self.cfg.dedup_by_server { !s.top_q.contains(&server) } else { !s.links.contains(&link) };
            if fresh {
                s.top_q.push(server);
                s.times.push(at);
                s.links.push(link);
            }
        }
    }

    /// Fingerprints usable for a transaction first seen at `t`.
    fn live_at(&self, t: Millis) -> Vec<&LearnedFingerprint> {
        let idle = self.cfg.idle_timeout_secs * MS_PER_SEC;
        self.fingerprints.values().filter(|f| f.first_seen <= t && t <= f.last_seen + idle).collect()
    }

    /// Matches every sighting (including ones seen before the matching
    /// fingerprint was learned) against the fingerprints live at the time.
    pub fn records(&self) -> Vec<(TxSighting, Option<DeanonRecord>)> {
        self.sightings
            .values()
            .map(|s| (s.clone(), match_sighting(s, &self.live_at(s.first_seen()))))
            .collect()
    }
}

impl Observer for Attacker {
    fn on_message(&mut self, _world: &mut World, d: Delivery<'_>) {
        let Some(&server) = self.link_server.get(&d.link) else { return };
        match d.msg {
            Message::Addr(addrs) => self.on_addr(d.at, server, addrs),
            Message::Inv(txs) => self.on_inv(d.at, d.link, server, txs),
            _ => {}
        }
    }

    fn on_action(&mut self, world: &mut World, tag: u64) {
        match tag {
            TAG_REBROADCAST => {
                // Rebroadcast only fails on links closed under us, which the
                // loop already skips.
                let _ = self.rebroadcast_candidates(world);
                world.schedule_action(world.now() + self.cfg.rebroadcast_period_secs * MS_PER_SEC, TAG_REBROADCAST);
            }
            TAG_RECONNECT => self.reconnect_listeners(world),
            _ => {}
        }
    }
}

/// Ground truth for an attacked world.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AttackReport {
    pub client_txs: u64,
    pub sighted_txs: u64,
    pub three_level: u64,
    pub three_level_unique: u64,
    pub three_level_correct: u64,
    pub two_level: u64,
    pub one_level: u64,
    pub unrecognized: u64,
    /// Unique three-level matches that are correct, over all client txs.
    pub deanon_rate: f64,
    /// Mean size of E′ over client advertisements at connect.
    pub mean_observed_entries: f64,
    /// Fraction of observed entries that are true entries.
    pub entry_precision: f64,
    /// `hist[L]`: txs with `L` true entry nodes among the top-q relayers.
    pub top_q_entry_hist: Vec<u64>,
    pub immediate_txs: u64,
    pub immediate_ge3: f64,
    pub trickled_txs: u64,
    pub trickled_ge3: f64,
    pub achieved_connections_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordRow {
    pub tx_id: u64,
    pub ip: Option<u64>,
    pub session_id: Option<u64>,
    pub tuple_level: String,
    pub n_candidates: usize,
    pub correct: bool,
}

/// Who advertised what, per `(address, stamp)`.
fn advert_index(world: &World) -> HashMap<FingerprintKey, (NodeId, u32)> {
    let mut idx = HashMap::new();
    for c in &world.connects {
        if let Some(addr) = c.advertised {
            idx.entry(FingerprintKey { addr, session_id: c.at / MS_PER_SEC }).or_insert((c.client, c.session));
        }
    }
    for e in world.entry_changes.iter().filter(|e| e.added.is_some()) {
        let addr = world.node(e.client).expect("client").public_addr;
        idx.entry(FingerprintKey { addr, session_id: e.at / MS_PER_SEC }).or_insert((e.client, e.session));
    }
    idx
}

/// True entry set of `client` in `session` at time `t`.
fn entries_at(world: &World, client: NodeId, session: u32, t: Millis) -> BTreeSet<NodeId> {
    let mut set: BTreeSet<NodeId> = world
        .connects
        .iter()
        .rfind(|c| c.client == client && c.session == session)
        .map(|c| c.entries.iter().copied().collect())
        .unwrap_or_default();
    for e in world.entry_changes.iter().filter(|e| e.client == client && e.session == session && e.at <= t) {
        set.remove(&e.dropped);
        if let Some(a) = e.added {
            set.insert(a);
        }
    }
    set
}

/// Scores the attacker's output against the world's records.
pub fn evaluate(world: &World, attacker: &Attacker) -> (AttackReport, Vec<RecordRow>) {
    let adverts = advert_index(world);
    let records: HashMap<TxId, (TxSighting, Option<DeanonRecord>)> =
        attacker.records().into_iter().map(|(s, r)| (s.tx, (s, r))).collect();
    let q = attacker.cfg.q;
    let mut rep = AttackReport { top_q_entry_hist: vec![0; q + 1], ..Default::default() };
    let mut rows = Vec::new();
    let (mut imm_ge3, mut tri_ge3) = (0u64, 0u64);
    for t in world.txs.iter().filter(|t| !world.is_server(t.origin)) {
        rep.client_txs += 1;
        let truth = (t.origin, t.session);
        let entries = entries_at(world, t.origin, t.session, t.at);
        let (sighting, record) = match records.get(&t.tx) {
            Some((s, r)) => (Some(s), r.as_ref()),
            None => (None, None),
        };
        let in_top = sighting.map_or(0, |s| s.top_q.iter().filter(|x| entries.contains(x)).count());
        rep.top_q_entry_hist[in_top.min(q)] += 1;
        if t.immediate {
            rep.immediate_txs += 1;
            imm_ge3 += (in_top >= 3) as u64;
        } else {
            rep.trickled_txs += 1;
            tri_ge3 += (in_top >= 3) as u64;
        }
        rep.sighted_txs += sighting.is_some() as u64;
        let correct = record.is_some_and(|r| r.candidates.len() == 1 && adverts.get(&r.candidates[0]) == Some(&truth));
        match record.map(|r| r.tuple_level) {
            Some(TupleLevel::Three) => {
                rep.three_level += 1;
                let r = record.expect("matched");
                if r.candidates.len() == 1 {
                    rep.three_level_unique += 1;
                    rep.three_level_correct += correct as u64;
                }
            }
            Some(TupleLevel::Two) => rep.two_level += 1,
            Some(TupleLevel::One) => rep.one_level += 1,
            None => rep.unrecognized += 1,
        }
        rows.push(RecordRow {
            tx_id: t.tx.0,
            ip: record.map(|r| r.ip.0),
            session_id: record.map(|r| r.session_id),
            tuple_level: record.map_or("unrecognized", |r| r.tuple_level.as_str()).to_string(),
            n_candidates: record.map_or(0, |r| r.candidates.len()),
            correct,
        });
    }
    let frac = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    rep.deanon_rate = frac(rep.three_level_correct, rep.client_txs);
    rep.immediate_ge3 = frac(imm_ge3, rep.immediate_txs);
    rep.trickled_ge3 = frac(tri_ge3, rep.trickled_txs);

    let by_key: HashMap<FingerprintKey, &LearnedFingerprint> = attacker.fingerprints.iter().map(|(k, f)| (*k, f)).collect();
    let (mut n_adv, mut sum_e, mut obs, mut true_obs) = (0u64, 0usize, 0usize, 0usize);
    for c in world.connects.iter().filter(|c| !world.is_server(c.client)) {
        let Some(addr) = c.advertised else { continue };
        n_adv += 1;
        let key = FingerprintKey { addr, session_id: c.at / MS_PER_SEC };
        if let Some(f) = by_key.get(&key) {
            sum_e += f.observed_entries.len();
            let truth = entries_at(world, c.client, c.session, f.last_seen);
            let initial: BTreeSet<NodeId> = c.entries.iter().copied().collect();
            obs += f.observed_entries.len();
            true_obs += f.observed_entries.iter().filter(|s| truth.contains(s) || initial.contains(s)).count();
        }
    }
    rep.mean_observed_entries = frac(sum_e as u64, n_adv);
    rep.entry_precision = if obs == 0 { 1.0 } else { true_obs as f64 / obs as f64 };
    let achieved: Vec<usize> = attacker.links.values().map(|l| l.achieved).collect();
    rep.achieved_connections_mean = frac(achieved.iter().sum::<usize>() as u64, achieved.len() as u64);
    (rep, rows)
}
