//! Discrete-event simulator of Bitcoin's peer-to-peer gossip layer, with an
//! attacker toolkit for linking clients to their transactions, topology
//! probes, analytic success/cost models and an alternative-chain difficulty
//! planner.

pub mod altchain;
pub mod attacker;
pub mod analysis;
pub mod hash;
pub mod netsim;
pub mod protocol;
pub mod scenario;
pub mod topology;
