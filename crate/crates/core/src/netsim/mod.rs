//! Seeded discrete-event simulator of the gossip network.
//!
//! Time is integer milliseconds. Events are ordered by `(time, insertion
//! sequence)`. All randomness comes from one ChaCha stream seeded by the
//! world config, so a config plus a script fully determines a run.
//!
//! Attacker and prober connections terminate at *controlled* nodes: honest
//! servers treat those links like any other neighbour, but whatever arrives at
//! a controlled node is handed to an [`Observer`] instead of being processed.

mod config;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet, VecDeque};
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use thiserror::Error;

pub use config::{ChurnModel, DelayModel, LatencyDist, LogLevel, SessionDist, WorldConfig};

use crate::hash::{mix64, StreamDigest};
use crate::protocol::{
    day_index, getaddr_response, is_immediate, responsible_positions, should_forward_addr, trickle_pick, AddrDb,
    Connection, Millis, NetAddress, NodeId, NodeRole, TxId, MS_PER_DAY, MS_PER_SEC, TRICKLE_INTERVAL_MS,
};

/// Public addresses of NAT groups live above this id.
pub const NAT_ADDR_BASE: u64 = 1 << 32;
/// Proxy exit addresses.
pub const PROXY_ADDR_BASE: u64 = 1 << 36;
/// Fake addresses injected by probes.
pub const MARKER_BASE: u64 = 1 << 40;

const MAX_ADDR_PER_MSG: usize = 1000;

pub type LinkId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum NetsimError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("infeasible config: {0}")]
    Infeasible(String),
    #[error("unknown node {0:?}")]
    UnknownNode(NodeId),
    #[error("node {0:?} is not a server")]
    NotAServer(NodeId),
    #[error("node {0:?} is not a client")]
    NotAClient(NodeId),
    #[error("client is already online")]
    ClientOnline,
    #[error("node {0:?} is offline")]
    Offline(NodeId),
    #[error("server {0:?} has no free connection slot")]
    NoFreeSlot(NodeId),
    #[error("link {0} is closed")]
    LinkClosed(LinkId),
    #[error("node {0:?} is not an endpoint of link {1}")]
    NotEndpoint(NodeId, LinkId),
    #[error("tor ban policy is disabled in this world")]
    TorBanDisabled,
    #[error("server graph is not connected")]
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Addr(Vec<NetAddress>),
    Inv(Vec<TxId>),
    GetData(TxId),
    Tx(TxId),
    GetAddr,
}

impl Message {
    fn code(&self) -> u64 {
        match self {
            Message::Addr(_) => 1,
            Message::Inv(_) => 2,
            Message::GetData(_) => 3,
            Message::Tx(_) => 4,
            Message::GetAddr => 5,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Message::Addr(_) => "addr",
            Message::Inv(_) => "inv",
            Message::GetData(_) => "getdata",
            Message::Tx(_) => "tx",
            Message::GetAddr => "getaddr",
        }
    }

    fn payload_id(&self) -> u64 {
        match self {
            Message::Addr(a) => a.first().map_or(0, |x| x.owner.0),
            Message::Inv(t) => t.first().map_or(0, |x| x.0),
            Message::GetData(t) | Message::Tx(t) => t.0,
            Message::GetAddr => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum EventKind {
    Deliver { link: LinkId, from: NodeId, to: NodeId, msg: Message },
    TrickleTick(NodeId),
    ConnectClient(NodeId),
    DisconnectClient(NodeId),
    Disconnect { link: LinkId },
    GenerateTx(NodeId, TxId),
    AttackerAction(u64),
    ClientArrival,
}

#[derive(Debug)]
struct Scheduled {
    at: Millis,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.at, self.seq) == (o.at, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    // BinaryHeap is a max-heap; invert for earliest-first.
    fn cmp(&self, o: &Self) -> Ordering {
        (o.at, o.seq).cmp(&(self.at, self.seq))
    }
}

#[derive(Debug, Clone)]
pub struct Link {
    pub id: LinkId,
    pub a: NodeId,
    pub b: NodeId,
    pub latency: Millis,
    pub open: bool,
    pub opened_at: Millis,
    ends: [Connection; 2],
}

impl Link {
    pub fn other(&self, n: NodeId) -> NodeId {
        if self.a == n {
            self.b
        } else {
            self.a
        }
    }

    fn idx(&self, n: NodeId) -> usize {
        if self.a == n {
            0
        } else {
            debug_assert_eq!(self.b, n);
            1
        }
    }

    /// The connection state `n` keeps for this link.
    pub fn end(&self, n: NodeId) -> &Connection {
        &self.ends[self.idx(n)]
    }

    fn end_mut(&mut self, n: NodeId) -> &mut Connection {
        let i = self.idx(n);
        &mut self.ends[i]
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub role: NodeRole,
    /// Attacker or prober endpoint.
    pub controlled: bool,
    pub online: bool,
    pub salt: u64,
    pub db: AddrDb,
    links: Vec<LinkId>,
    /// Address the node is known by (NAT address for clients).
    pub public_addr: NodeId,
    pub proxy: Option<NodeId>,
    proxy_ban_until: Millis,
    known_txs: HashSet<TxId>,
    requested: HashSet<TxId>,
    tick_pending: bool,
    tick_phase: Millis,
    pending_ends: usize,
    pub session: u32,
}

impl Node {
    pub fn links(&self) -> &[LinkId] {
        &self.links
    }

    pub fn degree(&self) -> usize {
        self.links.len()
    }

    pub fn knows_tx(&self, tx: TxId) -> bool {
        self.known_txs.contains(&tx)
    }

    /// Offset of this node's trickle grid within each 100 ms round.
    pub fn tick_phase(&self) -> Millis {
        self.tick_phase
    }

    pub fn proxy_banned(&self, now: Millis) -> bool {
        self.proxy_ban_until > now
    }
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct EntryFingerprint {
    pub client: NodeId,
    pub entries: Vec<NodeId>,
    pub session_start: Millis,
    /// Fewer than `outgoing_per_peer` servers had a free slot.
    pub degraded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConnectRecord {
    pub client: NodeId,
    pub session: u32,
    /// Address advertised to the entry nodes; `None` when hidden behind a proxy.
    pub advertised: Option<NodeId>,
    pub at: Millis,
    pub entries: Vec<NodeId>,
    pub degraded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntryChange {
    pub client: NodeId,
    pub session: u32,
    pub at: Millis,
    pub dropped: NodeId,
    pub added: Option<NodeId>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TxRecord {
    pub tx: TxId,
    pub origin: NodeId,
    pub session: u32,
    pub at: Millis,
    /// Whether the origin announced it to all neighbours at once.
    pub immediate: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LogRecord {
    pub t: Millis,
    pub kind: &'static str,
    pub from: Option<u64>,
    pub to: Option<u64>,
    pub payload_id: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Stats {
    pub events: u64,
    pub sent: u64,
    pub delivered_addr: u64,
    pub delivered_inv: u64,
    pub delivered_getdata: u64,
    pub delivered_tx: u64,
    pub delivered_getaddr: u64,
    pub dropped_closed: u64,
    pub trickle_ticks: u64,
}

/// Read-only view of a delivery to a controlled node.
#[derive(Debug)]
pub struct Delivery<'a> {
    pub at: Millis,
    pub link: LinkId,
    pub from: NodeId,
    pub to: NodeId,
    pub msg: &'a Message,
}

/// Receives everything delivered to controlled nodes and scheduled attacker
/// actions.
pub trait Observer {
    fn on_message(&mut self, world: &mut World, d: Delivery<'_>);
    fn on_action(&mut self, _world: &mut World, _tag: u64) {}
}

impl Observer for () {
    fn on_message(&mut self, _: &mut World, _: Delivery<'_>) {}
}

/// Comparable structural dump used for determinism checks.
#[derive(Debug, Serialize, PartialEq, Eq)]
pub struct WorldSnapshot {
    pub now: Millis,
    pub nodes: Vec<(u64, NodeRole, u64, Vec<u64>)>,
    pub links: Vec<(u64, u64, Millis, u64, u64, bool)>,
}

pub struct World {
    cfg: WorldConfig,
    now: Millis,
    rng: ChaCha8Rng,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    nodes: Vec<Node>,
    links: Vec<Link>,
    n_servers: usize,
    n_clients: usize,
    next_tx: u64,
    digest: StreamDigest,
    log: Vec<LogRecord>,
    stats: Stats,
    pub connects: Vec<ConnectRecord>,
    pub entry_changes: Vec<EntryChange>,
    pub txs: Vec<TxRecord>,
}

impl World {
    /// Builds the server graph: every server opens `outgoing_per_peer`
    /// connections to distinct random servers, then extra random links are
    /// added up to `target_mean_degree`. Clients start offline.
    pub fn build(cfg: WorldConfig) -> Result<World, NetsimError> {
        let mut w = Self::init(cfg)?;
        w.build_server_graph()?;
        w.preload_server_addrs();
        Ok(w)
    }

    /// Like [`World::build`] but with an explicit server graph (pairs of
    /// server indices). Connectivity is not required.
    pub fn build_with_edges(cfg: WorldConfig, edges: &[(u64, u64)]) -> Result<World, NetsimError> {
        let mut w = Self::init(cfg)?;
        for &(a, b) in edges {
            if a == b || !w.is_server(NodeId(a)) || !w.is_server(NodeId(b)) {
                return Err(NetsimError::InvalidConfig(format!("bad edge ({a}, {b})")));
            }
            w.open_link_raw(NodeId(a), NodeId(b));
        }
        w.preload_server_addrs();
        Ok(w)
    }

    fn init(cfg: WorldConfig) -> Result<World, NetsimError> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut w = World {
            n_servers: cfg.n_servers,
            n_clients: cfg.n_clients,
            cfg,
            now: 0,
            rng,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: Vec::new(),
            links: Vec::new(),
            next_tx: 1,
            digest: StreamDigest::default(),
            log: Vec::new(),
            stats: Stats::default(),
            connects: Vec::new(),
            entry_changes: Vec::new(),
            txs: Vec::new(),
        };
        let n_proxy_clients = (w.cfg.proxy_fraction * w.cfg.n_clients as f64).round() as usize;
        for i in 0..w.n_servers + w.n_clients {
            let server = i < w.n_servers;
            let ci = i.saturating_sub(w.n_servers);
            let public = if server {
                NodeId(i as u64)
            } else {
                NodeId(NAT_ADDR_BASE + (ci / w.cfg.clients_per_nat) as u64)
            };
            let proxy = (!server && ci < n_proxy_clients).then(|| NodeId(PROXY_ADDR_BASE + ci as u64));
            let node = w.new_node(NodeId(i as u64), if server { NodeRole::Server } else { NodeRole::Client }, false, public, proxy);
            w.nodes.push(node);
        }
        if w.cfg.churn_model.client_arrivals_per_hour > 0.0 && w.n_clients > 0 {
            let dt = w.next_arrival_gap();
            w.push(dt, EventKind::ClientArrival);
        }
        Ok(w)
    }

    fn new_node(&mut self, id: NodeId, role: NodeRole, controlled: bool, public_addr: NodeId, proxy: Option<NodeId>) -> Node {
        let salt = self.rng.random();
        Node {
            id,
            role,
            controlled,
            online: role == NodeRole::Server,
            salt,
            db: AddrDb::with_capacity(self.cfg.addr_db_capacity, salt),
            links: Vec::new(),
            public_addr,
            proxy,
            proxy_ban_until: 0,
            known_txs: HashSet::new(),
            requested: HashSet::new(),
            tick_pending: false,
            tick_phase: self.rng.random_range(0..TRICKLE_INTERVAL_MS),
            pending_ends: 0,
            session: 0,
        }
    }

    fn build_server_graph(&mut self) -> Result<(), NetsimError> {
        let s = self.n_servers;
        let k = self.cfg.outgoing_per_peer;
        let cap = self.cfg.max_connections_per_server;
        let mut adj: Vec<HashSet<usize>> = vec![HashSet::new(); s];
        for i in 0..s {
            let mut made = 0;
            let mut attempts = 0;
            while made < k {
                attempts += 1;
                let j = if attempts < 64 * k {
                    self.rng.random_range(0..s)
                } else {
                    let free: Vec<usize> = (0..s).filter(|&j| j != i && !adj[i].contains(&j) && adj[j].len() < cap).collect();
                    if free.is_empty() {
                        // Small worlds: everyone is already a neighbour.
                        if adj[i].len() >= k {
                            break;
                        }
                        return Err(NetsimError::Infeasible(format!("server {i} cannot find {k} peers")));
                    }
                    free[self.rng.random_range(0..free.len())]
                };
                if j == i || adj[i].contains(&j) || adj[j].len() >= cap || adj[i].len() >= cap {
                    continue;
                }
                adj[i].insert(j);
                adj[j].insert(i);
                self.open_link_raw(NodeId(i as u64), NodeId(j as u64));
                made += 1;
            }
        }
        if let Some(target) = self.cfg.target_mean_degree {
            let mut total: usize = adj.iter().map(|a| a.len()).sum();
            let mut stalls = 0;
            while (total as f64) / (s as f64) < target {
                let i = self.rng.random_range(0..s);
                let j = self.rng.random_range(0..s);
                if i == j || adj[i].contains(&j) || adj[i].len() >= cap || adj[j].len() >= cap {
                    stalls += 1;
                    if stalls > 1_000_000 {
                        return Err(NetsimError::Infeasible(format!("cannot reach mean degree {target}")));
                    }
                    continue;
                }
                adj[i].insert(j);
                adj[j].insert(i);
                self.open_link_raw(NodeId(i as u64), NodeId(j as u64));
                total += 2;
            }
        }
        if !self.servers_connected() {
            return Err(NetsimError::Disconnected);
        }
        Ok(())
    }

    fn preload_server_addrs(&mut self) {
        let s = self.n_servers;
        let want = (self.cfg.server_addr_knowledge * s as f64).round() as usize;
        for i in 0..s {
            let mut known: Vec<usize> = self.nodes[i].links.iter().map(|&l| self.links[l].other(NodeId(i as u64)).0 as usize).collect();
            known.extend(sample(&mut self.rng, s, want.min(s)));
            for j in known {
                if j != i {
                    let addr = NetAddress::reachable(NodeId(j as u64), 0);
                    self.nodes[i].db.insert(addr, &mut self.rng);
                }
            }
        }
    }

    /// Whether the online servers form one component over server-server links.
    pub fn servers_connected(&self) -> bool {
        let online: Vec<usize> = (0..self.n_servers).filter(|&i| self.nodes[i].online).collect();
        let Some(&start) = online.first() else { return true };
        let mut seen = vec![false; self.n_servers];
        let mut q = VecDeque::from([start]);
        seen[start] = true;
        let mut count = 1;
        while let Some(i) = q.pop_front() {
            for &l in &self.nodes[i].links {
                let j = self.links[l].other(NodeId(i as u64)).0 as usize;
                if j < self.n_servers && !seen[j] && self.nodes[j].online {
                    seen[j] = true;
                    count += 1;
                    q.push_back(j);
                }
            }
        }
        count == online.len()
    }

    // ---- accessors ----

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    pub fn stats(&self) -> &Stats {
        &self.stats
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0 as usize)
    }

    pub fn link(&self, id: LinkId) -> &Link {
        &self.links[id]
    }

    pub fn n_servers(&self) -> usize {
        self.n_servers
    }

    pub fn n_clients(&self) -> usize {
        self.n_clients
    }

    pub fn server_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.n_servers as u64).map(NodeId)
    }

    pub fn client_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        (self.n_servers as u64..(self.n_servers + self.n_clients) as u64).map(NodeId)
    }

    pub fn is_server(&self, id: NodeId) -> bool {
        (id.0 as usize) < self.n_servers
    }

    pub fn is_online_server(&self, id: NodeId) -> bool {
        self.is_server(id) && self.nodes[id.0 as usize].online
    }

    /// Neighbours of `n` over open links, in link order.
    pub fn neighbors(&self, n: NodeId) -> Vec<NodeId> {
        self.nodes[n.0 as usize].links.iter().map(|&l| self.links[l].other(n)).collect()
    }

    pub fn server_neighbors(&self, n: NodeId) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.neighbors(n).into_iter().filter(|m| self.is_server(*m)).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn mean_server_degree(&self) -> f64 {
        let tot: usize = (0..self.n_servers).map(|i| self.server_neighbors(NodeId(i as u64)).len()).sum();
        tot as f64 / self.n_servers as f64
    }

    pub fn knows_tx(&self, n: NodeId, tx: TxId) -> bool {
        self.nodes[n.0 as usize].known_txs.contains(&tx)
    }

    /// Queued-but-unsent items on `n`'s end of `link`.
    pub fn pending_on(&self, link: LinkId, n: NodeId) -> usize {
        self.links[link].end(n).pending()
    }

    pub fn digest(&self) -> u64 {
        self.digest.finish()
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn write_log<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for r in &self.log {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> WorldSnapshot {
        WorldSnapshot {
            now: self.now,
            nodes: self
                .nodes
                .iter()
                .map(|n| (n.id.0, n.role, n.salt, n.links.iter().map(|&l| self.links[l].other(n.id).0).collect()))
                .collect(),
            links: self
                .links
                .iter()
                .map(|l| (l.a.0, l.b.0, l.latency, l.ends[0].nonce, l.ends[1].nonce, l.open))
                .collect(),
        }
    }

    /// Connection conservation and the per-server cap.
    pub fn check_invariants(&self) -> Result<(), String> {
        let open = self.links.iter().filter(|l| l.open).count();
        let deg: usize = self.nodes.iter().map(|n| n.links.len()).sum();
        if deg != 2 * open {
            return Err(format!("degree sum {deg} != 2 x {open} open links"));
        }
        for n in &self.nodes[..self.n_servers] {
            if n.links.len() > self.cfg.max_connections_per_server {
                return Err(format!("server {:?} has {} connections", n.id, n.links.len()));
            }
        }
        for n in &self.nodes {
            if n.role == NodeRole::Client {
                if let Some(&l) = n.links.iter().find(|&&l| self.links[l].b == n.id) {
                    return Err(format!("client {:?} holds inbound link {l}", n.id));
                }
            }
        }
        Ok(())
    }

    // ---- scheduling ----

    fn push(&mut self, at: Millis, kind: EventKind) {
        self.seq += 1;
        self.queue.push(Scheduled { at, seq: self.seq, kind });
    }

    pub fn schedule_action(&mut self, at: Millis, tag: u64) {
        self.push(at.max(self.now), EventKind::AttackerAction(tag));
    }

    /// Online from `start` to `end` (if given).
    pub fn schedule_session(&mut self, client: NodeId, start: Millis, end: Option<Millis>) -> Result<(), NetsimError> {
        self.require_client(client)?;
        self.push(start.max(self.now), EventKind::ConnectClient(client));
        if let Some(e) = end {
            self.push(e.max(start), EventKind::DisconnectClient(client));
        }
        Ok(())
    }

    pub fn schedule_tx(&mut self, origin: NodeId, at: Millis) -> Result<TxId, NetsimError> {
        self.node(origin).ok_or(NetsimError::UnknownNode(origin))?;
        let tx = self.fresh_tx();
        self.push(at.max(self.now), EventKind::GenerateTx(origin, tx));
        Ok(tx)
    }

    fn fresh_tx(&mut self) -> TxId {
        // Spread ids so the immediate/trickle split does not correlate with order.
        let t = TxId(crate::hash::mix64(self.cfg.seed ^ self.next_tx.wrapping_mul(0x9e37_79b9)));
        self.next_tx += 1;
        t
    }

    fn require_client(&self, c: NodeId) -> Result<&Node, NetsimError> {
        let n = self.node(c).ok_or(NetsimError::UnknownNode(c))?;
        if n.role != NodeRole::Client || n.controlled {
            return Err(NetsimError::NotAClient(c));
        }
        Ok(n)
    }

    fn next_arrival_gap(&mut self) -> Millis {
        let per_ms = self.cfg.churn_model.client_arrivals_per_hour / 3_600_000.0;
        let dt: f64 = Exp::new(per_ms).expect("positive rate").sample(&mut self.rng);
        (dt as Millis).max(1)
    }

    // ---- links ----

    fn open_link_raw(&mut self, a: NodeId, b: NodeId) -> LinkId {
        let id = self.links.len();
        let latency = self.path_latency(a, b);
        let na = self.rng.random();
        let nb = self.rng.random();
        self.links.push(Link {
            id,
            a,
            b,
            latency,
            open: true,
            opened_at: self.now,
            ends: [Connection::new(a, b, na, self.now), Connection::new(b, a, nb, self.now)],
        });
        self.nodes[a.0 as usize].links.push(id);
        self.nodes[b.0 as usize].links.push(id);
        id
    }

    /// One-way latency between two hosts. Drawn once per unordered pair, so
    /// parallel connections between the same hosts share a path.
    fn path_latency(&self, a: NodeId, b: NodeId) -> Millis {
        let (lo, hi) = if a <= b { (a.0, b.0) } else { (b.0, a.0) };
        let key = mix64(self.cfg.seed ^ mix64(lo.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ mix64(hi)));
        self.cfg.delay_model.sample_latency(&mut ChaCha8Rng::seed_from_u64(key))
    }

    /// Opens an outbound connection from `from` to server `to`.
    pub fn open_link(&mut self, from: NodeId, to: NodeId) -> Result<LinkId, NetsimError> {
        self.node(from).ok_or(NetsimError::UnknownNode(from))?;
        let t = self.node(to).ok_or(NetsimError::UnknownNode(to))?;
        if !t.role.accepts_inbound() || t.controlled {
            return Err(NetsimError::NotAServer(to));
        }
        if !t.online {
            return Err(NetsimError::Offline(to));
        }
        if t.links.len() >= self.cfg.max_connections_per_server {
            return Err(NetsimError::NoFreeSlot(to));
        }
        if from == to {
            return Err(NetsimError::NotEndpoint(from, usize::MAX));
        }
        Ok(self.open_link_raw(from, to))
    }

    pub fn close_link(&mut self, id: LinkId) {
        let l = &mut self.links[id];
        if !l.open {
            return;
        }
        l.open = false;
        let (a, b) = (l.a, l.b);
        for (i, n) in [a, b].into_iter().enumerate() {
            let had = self.links[id].ends[i].pending() > 0;
            self.links[id].ends[i].addr_queue.clear();
            self.links[id].ends[i].tx_queue.clear();
            let node = &mut self.nodes[n.0 as usize];
            node.links.retain(|&x| x != id);
            if had {
                node.pending_ends -= 1;
            }
        }
    }

    /// Adds a node under outside control (attacker or prober endpoint).
    pub fn add_controlled_node(&mut self) -> NodeId {
        let id = NodeId(self.nodes.len() as u64);
        let mut n = self.new_node(id, NodeRole::Client, true, id, None);
        n.online = true;
        self.nodes.push(n);
        id
    }

    /// Sends `msg` from `from` over `link`; delivery after link latency plus
    /// processing delay.
    pub fn send(&mut self, link: LinkId, from: NodeId, msg: Message) -> Result<(), NetsimError> {
        let l = self.links.get(link).ok_or(NetsimError::LinkClosed(link))?;
        if !l.open {
            return Err(NetsimError::LinkClosed(link));
        }
        if l.a != from && l.b != from {
            return Err(NetsimError::NotEndpoint(from, link));
        }
        self.send_raw(link, from, msg);
        Ok(())
    }

    fn send_raw(&mut self, link: LinkId, from: NodeId, msg: Message) {
        let l = &self.links[link];
        let to = l.other(from);
        let at = self.now + l.latency + self.cfg.delay_model.processing_ms;
        self.stats.sent += 1;
        self.push(at, EventKind::Deliver { link, from, to, msg });
    }

    /// Answers a GETADDR from `server`'s database without going through the
    /// event loop.
    pub fn getaddr_now(&mut self, server: NodeId) -> Result<Vec<NetAddress>, NetsimError> {
        let n = self.node(server).ok_or(NetsimError::UnknownNode(server))?;
        if !self.is_server(server) {
            return Err(NetsimError::NotAServer(server));
        }
        if !n.online {
            return Err(NetsimError::Offline(server));
        }
        Ok(getaddr_response(&self.nodes[server.0 as usize].db, &mut self.rng))
    }

    // ---- topology helpers for probe experiments ----

    /// Reshapes `target`'s server neighbourhood to exactly `k` servers,
    /// closing or opening server-server links as needed.
    pub fn force_server_degree(&mut self, target: NodeId, k: usize) -> Result<(), NetsimError> {
        if !self.is_server(target) {
            return Err(NetsimError::NotAServer(target));
        }
        if k >= self.n_servers {
            return Err(NetsimError::Infeasible(format!("degree {k} needs more than {} servers", self.n_servers)));
        }
        loop {
            let server_links: Vec<LinkId> = self.nodes[target.0 as usize]
                .links
                .iter()
                .copied()
                .filter(|&l| self.is_server(self.links[l].other(target)))
                .collect();
            match server_links.len().cmp(&k) {
                Ordering::Equal => return Ok(()),
                Ordering::Greater => {
                    let l = server_links[self.rng.random_range(0..server_links.len())];
                    self.close_link(l);
                }
                Ordering::Less => {
                    let have: HashSet<NodeId> = self.neighbors(target).into_iter().collect();
                    let free: Vec<NodeId> = self
                        .server_ids()
                        .filter(|&s| s != target && !have.contains(&s) && self.nodes[s.0 as usize].links.len() < self.cfg.max_connections_per_server)
                        .collect();
                    if free.is_empty() || self.nodes[target.0 as usize].links.len() >= self.cfg.max_connections_per_server {
                        return Err(NetsimError::Infeasible("no free server to attach".into()));
                    }
                    let s = free[self.rng.random_range(0..free.len())];
                    self.open_link_raw(s, target);
                }
            }
        }
    }

    /// Brings `n` offline clients online with a link to `target` (plus their
    /// other regular entry connections). Returns the clients used.
    pub fn attach_clients(&mut self, target: NodeId, n: usize) -> Result<Vec<NodeId>, NetsimError> {
        let idle: Vec<NodeId> = self.client_ids().filter(|c| !self.nodes[c.0 as usize].online).take(n).collect();
        if idle.len() < n {
            return Err(NetsimError::Infeasible(format!("only {} offline clients", idle.len())));
        }
        for &c in &idle {
            self.open_link(c, target)?;
            self.client_connect(c)?;
        }
        Ok(idle)
    }

    // ---- clients ----

    /// Brings `client` online: it opens `outgoing_per_peer` connections to
    /// distinct random servers with free slots and advertises its address on
    /// each.
    pub fn client_connect(&mut self, client: NodeId) -> Result<EntryFingerprint, NetsimError> {
        let node = self.require_client(client)?;
        if node.online {
            return Err(NetsimError::ClientOnline);
        }
        let ci = client.0 as usize;
        let pre: HashSet<NodeId> = self.neighbors(client).into_iter().collect();
        self.nodes[ci].online = true;
        self.nodes[ci].session += 1;
        let want = self.cfg.outgoing_per_peer.saturating_sub(pre.len());
        let eligible: Vec<NodeId> = self
            .server_ids()
            .filter(|s| {
                let n = &self.nodes[s.0 as usize];
                n.online && n.links.len() < self.cfg.max_connections_per_server && !pre.contains(s)
            })
            .collect();
        let k = want.min(eligible.len());
        let picks: Vec<NodeId> = sample(&mut self.rng, eligible.len(), k).into_iter().map(|i| eligible[i]).collect();
        for &s in &picks {
            let l = self.open_link_raw(client, s);
            self.schedule_lifetime(l);
        }
        let links: Vec<LinkId> = self.nodes[ci].links.clone();
        let mut advertised = None;
        for l in links {
            let s = self.links[l].other(client);
            advertised = self.advertise(client, l, s).or(advertised);
        }
        let mut entries: Vec<NodeId> = self.neighbors(client);
        entries.sort();
        let degraded = entries.len() < self.cfg.outgoing_per_peer;
        let session = self.nodes[ci].session;
        self.connects.push(ConnectRecord { client, session, advertised, at: self.now, entries: entries.clone(), degraded });
        self.record("connect", Some(client.0), None, Some(session as u64));
        Ok(EntryFingerprint { client, entries, session_start: self.now, degraded })
    }

    fn advertise(&mut self, client: NodeId, link: LinkId, server: NodeId) -> Option<NodeId> {
        let c = &self.nodes[client.0 as usize];
        if c.proxy.is_some() && !self.nodes[server.0 as usize].proxy_banned(self.now) {
            return None;
        }
        let addr = NetAddress::reachable(c.public_addr, self.now / MS_PER_SEC);
        self.links[link].end_mut(client).mark_addr(addr.owner, self.now);
        self.send_raw(link, client, Message::Addr(vec![addr]));
        Some(addr.owner)
    }

    fn schedule_lifetime(&mut self, link: LinkId) {
        if let Some(life) = self.cfg.churn_model.sample_link_lifetime(&mut self.rng) {
            self.push(self.now + life, EventKind::Disconnect { link });
        }
    }

    pub fn client_disconnect(&mut self, client: NodeId) -> Result<(), NetsimError> {
        self.require_client(client)?;
        let ci = client.0 as usize;
        if !self.nodes[ci].online {
            return Ok(());
        }
        for l in self.nodes[ci].links.clone() {
            self.close_link(l);
        }
        self.nodes[ci].online = false;
        self.record("disconnect", Some(client.0), None, None);
        Ok(())
    }

    /// Bans proxy-originated inbound connections at each target server for
    /// a day.
    pub fn apply_tor_ban(&mut self, targets: &[NodeId]) -> Result<(), NetsimError> {
        if !self.cfg.tor_ban_enabled {
            return Err(NetsimError::TorBanDisabled);
        }
        for &t in targets {
            if !self.is_server(t) {
                return Err(NetsimError::NotAServer(t));
            }
        }
        for &t in targets {
            self.nodes[t.0 as usize].proxy_ban_until = self.now + MS_PER_DAY;
        }
        Ok(())
    }

    /// Originates a new transaction at `origin` now.
    pub fn generate_tx(&mut self, origin: NodeId) -> Result<TxId, NetsimError> {
        let n = self.node(origin).ok_or(NetsimError::UnknownNode(origin))?;
        if !n.online {
            return Err(NetsimError::Offline(origin));
        }
        let tx = self.fresh_tx();
        self.originate(origin, tx);
        Ok(tx)
    }

    fn originate(&mut self, origin: NodeId, tx: TxId) {
        let n = &self.nodes[origin.0 as usize];
        let immediate = is_immediate(tx, n.salt);
        let session = n.session;
        self.txs.push(TxRecord { tx, origin, session, at: self.now, immediate });
        self.record("generate_tx", Some(origin.0), None, Some(tx.0));
        self.accept_tx(origin, tx);
    }

    // ---- event loop ----

    /// Processes every event scheduled at or before `t_end`.
    pub fn run_until<O: Observer>(&mut self, t_end: Millis, obs: &mut O) {
        while let Some(top) = self.queue.peek() {
            if top.at > t_end {
                break;
            }
            let ev = self.queue.pop().expect("peeked");
            self.now = ev.at;
            self.stats.events += 1;
            self.dispatch(ev, obs);
        }
        self.now = self.now.max(t_end);
    }

    /// Steps in `step` increments until `done` holds or `t_max` passes.
    pub fn run_while<O: Observer, F: FnMut(&World) -> bool>(&mut self, step: Millis, t_max: Millis, obs: &mut O, mut done: F) -> bool {
        while !done(self) {
            if self.now >= t_max {
                return false;
            }
            let t = (self.now + step).min(t_max);
            self.run_until(t, obs);
        }
        true
    }

    pub fn pending_events(&self) -> usize {
        self.queue.len()
    }

    fn record(&mut self, kind: &'static str, from: Option<u64>, to: Option<u64>, payload_id: Option<u64>) {
        if self.cfg.log_level != LogLevel::None {
            self.log.push(LogRecord { t: self.now, kind, from, to, payload_id });
        }
    }

    fn dispatch<O: Observer>(&mut self, ev: Scheduled, obs: &mut O) {
        match ev.kind {
            EventKind::Deliver { link, from, to, msg } => {
                self.digest.update(&[ev.at, msg.code(), from.0, to.0, msg.payload_id()]);
                if self.cfg.log_level == LogLevel::All {
                    self.record(msg.kind(), Some(from.0), Some(to.0), Some(msg.payload_id()));
                }
                if !self.links[link].open {
                    self.stats.dropped_closed += 1;
                    return;
                }
                match &msg {
                    Message::Addr(_) => self.stats.delivered_addr += 1,
                    Message::Inv(_) => self.stats.delivered_inv += 1,
                    Message::GetData(_) => self.stats.delivered_getdata += 1,
                    Message::Tx(_) => self.stats.delivered_tx += 1,
                    Message::GetAddr => self.stats.delivered_getaddr += 1,
                }
                if self.nodes[to.0 as usize].controlled {
                    obs.on_message(self, Delivery { at: ev.at, link, from, to, msg: &msg });
                } else {
                    self.handle(to, link, msg);
                }
            }
            EventKind::TrickleTick(n) => {
                self.digest.update(&[ev.at, 10, n.0]);
                self.on_tick(n);
            }
            EventKind::ConnectClient(c) => {
                self.digest.update(&[ev.at, 11, c.0]);
                // Scripted sessions for a client that is already up are no-ops.
                let _ = self.client_connect(c);
            }
            EventKind::DisconnectClient(c) => {
                self.digest.update(&[ev.at, 12, c.0]);
                let _ = self.client_disconnect(c);
            }
            EventKind::Disconnect { link } => {
                self.digest.update(&[ev.at, 13, link as u64]);
                self.churn_link(link);
            }
            EventKind::GenerateTx(n, tx) => {
                self.digest.update(&[ev.at, 14, n.0, tx.0]);
                if self.nodes[n.0 as usize].online {
                    self.originate(n, tx);
                } else {
                    self.record("tx_dropped_offline", Some(n.0), None, Some(tx.0));
                }
            }
            EventKind::AttackerAction(tag) => {
                self.digest.update(&[ev.at, 15, tag]);
                obs.on_action(self, tag);
            }
            EventKind::ClientArrival => {
                self.digest.update(&[ev.at, 16]);
                self.on_arrival();
            }
        }
    }

    fn on_arrival(&mut self) {
        let idle: Vec<NodeId> = self.client_ids().filter(|c| !self.nodes[c.0 as usize].online).collect();
        if !idle.is_empty() {
            let c = idle[self.rng.random_range(0..idle.len())];
            if self.client_connect(c).is_ok() {
                let secs = self.cfg.churn_model.session.sample_secs(&mut self.rng);
                let end = self.now + ((secs * 1000.0) as Millis).max(1);
                self.push(end, EventKind::DisconnectClient(c));
            }
        }
        let dt = self.next_arrival_gap();
        self.push(self.now + dt, EventKind::ClientArrival);
    }

    /// An entry connection dropped by churn; an online client replaces it.
    fn churn_link(&mut self, link: LinkId) {
        if !self.links[link].open {
            return;
        }
        let (a, b) = (self.links[link].a, self.links[link].b);
        self.close_link(link);
        let an = &self.nodes[a.0 as usize];
        if an.role != NodeRole::Client || an.controlled || !an.online {
            return;
        }
        let have: HashSet<NodeId> = self.neighbors(a).into_iter().collect();
        let eligible: Vec<NodeId> = self
            .server_ids()
            .filter(|s| *s != b && !have.contains(s) && self.nodes[s.0 as usize].online && self.nodes[s.0 as usize].links.len() < self.cfg.max_connections_per_server)
            .collect();
        let added = (!eligible.is_empty()).then(|| eligible[self.rng.random_range(0..eligible.len())]);
        if let Some(s) = added {
            let l = self.open_link_raw(a, s);
            self.schedule_lifetime(l);
            self.advertise(a, l, s);
        }
        let session = self.nodes[a.0 as usize].session;
        self.entry_changes.push(EntryChange { client: a, session, at: self.now, dropped: b, added });
        self.record("entry_change", Some(a.0), Some(b.0), added.map(|s| s.0));
    }

    fn handle(&mut self, n: NodeId, link: LinkId, msg: Message) {
        if !self.nodes[n.0 as usize].online {
            return;
        }
        match msg {
            Message::Addr(addrs) => self.on_addr(n, link, addrs),
            Message::Inv(txs) => {
                let now = self.now;
                for tx in txs {
                    self.links[link].end_mut(n).mark_tx(tx, now);
                    let node = &mut self.nodes[n.0 as usize];
                    if !node.known_txs.contains(&tx) && node.requested.insert(tx) {
                        self.send_raw(link, n, Message::GetData(tx));
                    }
                }
            }
            Message::GetData(tx) => {
                if self.nodes[n.0 as usize].known_txs.contains(&tx) {
                    self.send_raw(link, n, Message::Tx(tx));
                }
            }
            Message::Tx(tx) => {
                let now = self.now;
                self.links[link].end_mut(n).mark_tx(tx, now);
                self.accept_tx(n, tx);
            }
            Message::GetAddr => {
                if self.is_server(n) {
                    let reply = getaddr_response(&self.nodes[n.0 as usize].db, &mut self.rng);
                    for chunk in reply.chunks(MAX_ADDR_PER_MSG) {
                        self.send_raw(link, n, Message::Addr(chunk.to_vec()));
                    }
                }
            }
        }
    }

    fn on_addr(&mut self, n: NodeId, link: LinkId, addrs: Vec<NetAddress>) {
        let now = self.now;
        let day = day_index(now);
        let count = addrs.len();
        let ni = n.0 as usize;
        let own = self.nodes[ni].public_addr;
        let mut queued = false;
        for a in addrs {
            self.links[link].end_mut(n).mark_addr(a.owner, now);
            if a.owner != own {
                self.nodes[ni].db.insert(a, &mut self.rng);
            }
            let node = &self.nodes[ni];
            let links = &self.links;
            let picks = responsible_positions(a.owner, a.reachability, node.links.iter().map(|&l| links[l].end(n).nonce), node.salt, day);
            for p in picks {
                let l = self.nodes[ni].links[p];
                let conn = self.links[l].end_mut(n);
                if should_forward_addr(count, &a, now, conn) {
                    let was_idle = conn.pending() == 0;
                    conn.mark_addr(a.owner, now);
                    conn.addr_queue.push(a);
                    if was_idle {
                        self.nodes[ni].pending_ends += 1;
                    }
                    queued = true;
                }
            }
        }
        if queued {
            self.ensure_tick(n);
        }
    }

    fn accept_tx(&mut self, n: NodeId, tx: TxId) {
        let ni = n.0 as usize;
        if !self.nodes[ni].known_txs.insert(tx) {
            return;
        }
        self.nodes[ni].requested.remove(&tx);
        let now = self.now;
        let immediate = is_immediate(tx, self.nodes[ni].salt);
        let mut queued = false;
        for l in self.nodes[ni].links.clone() {
            let conn = self.links[l].end_mut(n);
            if conn.knows_tx(tx, now) {
                continue;
            }
            conn.mark_tx(tx, now);
            if immediate {
                self.send_raw(l, n, Message::Inv(vec![tx]));
            } else {
                let was_idle = conn.pending() == 0;
                conn.tx_queue.push(tx);
                if was_idle {
                    self.nodes[ni].pending_ends += 1;
                }
                queued = true;
            }
        }
        if queued {
            self.ensure_tick(n);
        }
    }

    fn ensure_tick(&mut self, n: NodeId) {
        let node = &mut self.nodes[n.0 as usize];
        if node.tick_pending {
            return;
        }
        node.tick_pending = true;
        let base = self.now - self.now % TRICKLE_INTERVAL_MS + node.tick_phase;
        let at = if base > self.now { base } else { base + TRICKLE_INTERVAL_MS };
        self.push(at, EventKind::TrickleTick(n));
    }

    fn on_tick(&mut self, n: NodeId) {
        self.stats.trickle_ticks += 1;
        let ni = n.0 as usize;
        self.nodes[ni].tick_pending = false;
        if !self.nodes[ni].online || self.nodes[ni].pending_ends == 0 {
            return;
        }
        let Ok(k) = trickle_pick(self.nodes[ni].links.len(), &mut self.rng) else { return };
        let l = self.nodes[ni].links[k];
        let conn = self.links[l].end_mut(n);
        if conn.pending() > 0 {
            let addrs = std::mem::take(&mut conn.addr_queue);
            let txs = std::mem::take(&mut conn.tx_queue);
            self.nodes[ni].pending_ends -= 1;
            for chunk in addrs.chunks(MAX_ADDR_PER_MSG) {
                self.send_raw(l, n, Message::Addr(chunk.to_vec()));
            }
            if !txs.is_empty() {
                self.send_raw(l, n, Message::Inv(txs));
            }
        }
        if self.nodes[ni].pending_ends > 0 {
            self.ensure_tick(n);
        }
    }
}

#[cfg(test)]
mod tests;
