//! Gossip rules of the reference client: responsible-node selection, ADDR
//! forwarding checks, per-connection histories, trickling, GETADDR sampling
//! and transaction-forwarding scheduling.
//!
//! Everything here is a pure function of its inputs (plus an explicit RNG
//! where the client draws randomness). The event loop lives in
//! [`crate::netsim`].

use std::collections::HashSet;

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::keyed_hash;

/// Simulated time in milliseconds.
pub type Millis = u64;

pub const MS_PER_SEC: Millis = 1_000;
pub const MS_PER_DAY: Millis = 86_400_000;

/// Maximum number of addresses an ADDR message may carry and still be relayed.
pub const MAX_RELAY_ADDR_COUNT: usize = 10;
/// Addresses older than this are stored but never relayed.
pub const ADDR_RELAY_MAX_AGE_MS: Millis = 600 * MS_PER_SEC;
/// Capacity of a node's address database.
pub const ADDR_DB_CAPACITY: usize = 20_480;
/// Upper bound on addresses returned for one GETADDR.
pub const GETADDR_MAX_REPLY: usize = 2_500;
/// Percentage of the database returned for one GETADDR.
pub const GETADDR_PERCENT: usize = 23;
/// Trickle round length.
pub const TRICKLE_INTERVAL_MS: Millis = 100;

/// Stands in for an IP address. Also used for addresses that do not belong
/// to a simulated node (NAT gateways, proxy exits, fake markers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u64);

/// Stands in for a transaction hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TxId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    /// Accepts inbound connections.
    Server,
    /// Behind NAT or a firewall; outbound only.
    Client,
}

impl NodeRole {
    pub fn accepts_inbound(self) -> bool {
        matches!(self, NodeRole::Server)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reachability {
    Reachable,
    Unreachable,
}

impl Reachability {
    /// Number of responsible neighbours an address of this kind is relayed to.
    pub fn relay_fanout(self) -> usize {
        match self {
            Reachability::Reachable => 2,
            Reachability::Unreachable => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetAddress {
    pub owner: NodeId,
    pub reachability: Reachability,
    /// Seconds since the simulation epoch.
    pub timestamp: u64,
}

impl NetAddress {
    pub fn reachable(owner: NodeId, timestamp: u64) -> Self {
        NetAddress { owner, reachability: Reachability::Reachable, timestamp }
    }

    /// Age relative to `now`; addresses stamped in the future have age zero.
    pub fn age_ms(&self, now: Millis) -> Millis {
        now.saturating_sub(self.timestamp.saturating_mul(MS_PER_SEC))
    }
}

#[inline]
pub fn day_index(now: Millis) -> u64 {
    now / MS_PER_DAY
}

/// One endpoint's view of a link: the per-connection state a node keeps for
/// a neighbour. Two links between the same pair of nodes have independent
/// histories and nonces.
#[derive(Debug, Clone)]
pub struct Connection {
    pub from: NodeId,
    pub to: NodeId,
    /// Random value assigned when the connection is established; replaces the
    /// reference client's use of the peer object's memory address.
    pub nonce: u64,
    pub established_at: Millis,
    addr_history: HashSet<NodeId>,
    tx_history: HashSet<TxId>,
    history_epoch: u64,
    pub(crate) addr_queue: Vec<NetAddress>,
    pub(crate) tx_queue: Vec<TxId>,
}

impl Connection {
    pub fn new(from: NodeId, to: NodeId, nonce: u64, established_at: Millis) -> Self {
        Connection {
            from,
            to,
            nonce,
            established_at,
            addr_history: HashSet::new(),
            tx_history: HashSet::new(),
            history_epoch: day_index(established_at),
            addr_queue: Vec::new(),
            tx_queue: Vec::new(),
        }
    }

    fn roll(&mut self, now: Millis) {
        let day = day_index(now);
        if day != self.history_epoch {
            self.addr_history.clear();
            self.tx_history.clear();
            self.history_epoch = day;
        }
    }

    pub fn history_epoch(&self) -> u64 {
        self.history_epoch
    }

    pub fn knows_addr(&self, owner: NodeId, now: Millis) -> bool {
        day_index(now) == self.history_epoch && self.addr_history.contains(&owner)
    }

    /// Records `owner` as sent over (or received from) this connection.
    /// Returns `true` if it was not known before.
    pub fn mark_addr(&mut self, owner: NodeId, now: Millis) -> bool {
        self.roll(now);
        self.addr_history.insert(owner)
    }

    pub fn knows_tx(&self, tx: TxId, now: Millis) -> bool {
        day_index(now) == self.history_epoch && self.tx_history.contains(&tx)
    }

    pub fn mark_tx(&mut self, tx: TxId, now: Millis) -> bool {
        self.roll(now);
        self.tx_history.insert(tx)
    }

    pub fn addr_history_len(&mut self, now: Millis) -> usize {
        self.roll(now);
        self.addr_history.len()
    }

    pub fn tx_history_len(&mut self, now: Millis) -> usize {
        self.roll(now);
        self.tx_history.len()
    }

    pub fn pending(&self) -> usize {
        self.addr_queue.len() + self.tx_queue.len()
    }
}

/// A node's address manager.
#[derive(Debug, Clone)]
pub struct AddrDb {
    entries: IndexMap<NodeId, NetAddress>,
    capacity: usize,
    pub salt: u64,
}

impl AddrDb {
    pub fn new(salt: u64) -> Self {
        Self::with_capacity(ADDR_DB_CAPACITY, salt)
    }

    pub fn with_capacity(capacity: usize, salt: u64) -> Self {
        assert!(capacity > 0);
        AddrDb { entries: IndexMap::new(), capacity, salt }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contains(&self, owner: NodeId) -> bool {
        self.entries.contains_key(&owner)
    }

    pub fn get(&self, owner: NodeId) -> Option<&NetAddress> {
        self.entries.get(&owner)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NetAddress> {
        self.entries.values()
    }

    /// Inserts or refreshes an entry. A new entry arriving at capacity evicts
    /// a uniformly chosen existing one.
    pub fn insert<R: Rng + ?Sized>(&mut self, addr: NetAddress, rng: &mut R) {
        if let Some(existing) = self.entries.get_mut(&addr.owner) {
            if addr.timestamp > existing.timestamp {
                existing.timestamp = addr.timestamp;
            }
            return;
        }
        if self.entries.len() >= self.capacity {
            let victim = rng.random_range(0..self.entries.len());
            self.entries.swap_remove_index(victim);
        }
        self.entries.insert(addr.owner, addr);
    }

    pub fn remove(&mut self, owner: NodeId) -> Option<NetAddress> {
        self.entries.swap_remove(&owner)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("no neighbors")]
    NoNeighbors,
}

fn responsible_rank(owner: NodeId, salt: u64, day: u64, nonce: u64) -> u64 {
    keyed_hash(salt, &[owner.0, day, nonce])
}

/// Positions (into `nonces`) of the neighbours responsible for relaying an
/// address, best first.
pub fn responsible_positions<I>(
    owner: NodeId,
    reachability: Reachability,
    nonces: I,
    salt: u64,
    day: u64,
) -> Vec<usize>
where
    I: IntoIterator<Item = u64>,
{
    let want = reachability.relay_fanout();
    let mut best: Vec<(u64, usize)> = Vec::with_capacity(want + 1);
    for (pos, nonce) in nonces.into_iter().enumerate() {
        let key = (responsible_rank(owner, salt, day, nonce), pos);
        if best.len() < want || key < best[best.len() - 1] {
            let at = best.partition_point(|b| *b < key);
            best.insert(at, key);
            best.truncate(want);
        }
    }
    best.into_iter().map(|(_, pos)| pos).collect()
}

/// The one or two neighbours a node relays `addr` to. Stable within a day;
/// re-randomized when the day changes or a connection is replaced.
pub fn responsible_nodes(addr: &NetAddress, neighbors: &[Connection], salt: u64, day: u64) -> Vec<NodeId> {
    responsible_positions(addr.owner, addr.reachability, neighbors.iter().map(|c| c.nonce), salt, day)
        .into_iter()
        .map(|i| neighbors[i].to)
        .collect()
}

/// Relay check for one address in a received ADDR message: at most ten
/// addresses in the message, no older than ten minutes, and not yet sent over
/// `conn` in the current epoch.
pub fn should_forward_addr(msg_addr_count: usize, addr: &NetAddress, now: Millis, conn: &Connection) -> bool {
    msg_addr_count <= MAX_RELAY_ADDR_COUNT
        && addr.age_ms(now) <= ADDR_RELAY_MAX_AGE_MS
        && !conn.knows_addr(addr.owner, now)
}

/// Whether a node with `salt` sends the inventory for `tx` to all neighbours at
/// once (roughly one transaction in four).
pub fn is_immediate(tx: TxId, salt: u64) -> bool {
    keyed_hash(salt, &[tx.0]) & 3 == 0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TxSchedule {
    pub immediate: bool,
    /// Positions of the neighbours the transaction is queued to.
    pub queued_to: Vec<usize>,
}

/// Queues `tx` on every connection that has not seen it yet and decides
/// whether the queues are flushed immediately or wait for trickling.
pub fn schedule_tx_forwarding(tx: TxId, neighbors: &[Connection], salt: u64, now: Millis) -> TxSchedule {
    let queued_to = neighbors
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.knows_tx(tx, now))
        .map(|(i, _)| i)
        .collect();
    TxSchedule { immediate: is_immediate(tx, salt), queued_to }
}

/// Uniform choice of this round's trickle neighbour.
pub fn trickle_pick<R: Rng + ?Sized>(n_neighbors: usize, rng: &mut R) -> Result<usize, ProtocolError> {
    if n_neighbors == 0 {
        return Err(ProtocolError::NoNeighbors);
    }
    Ok(rng.random_range(0..n_neighbors))
}

/// Number of addresses returned for a database of `db_len` entries:
/// 23% rounded half up, capped at 2500.
pub fn getaddr_reply_len(db_len: usize) -> usize {
    ((db_len * GETADDR_PERCENT + 50) / 100).min(GETADDR_MAX_REPLY)
}

/// Uniform sample without replacement from the database.
pub fn getaddr_response<R: Rng + ?Sized>(db: &AddrDb, rng: &mut R) -> Vec<NetAddress> {
    let want = getaddr_reply_len(db.len());
    rand::seq::index::sample(rng, db.len(), want)
        .into_iter()
        .map(|i| db.entries[i])
        .collect()
}
