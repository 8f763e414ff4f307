//! Closed-form attack model, churn false-positive Monte-Carlo and the
//! bandwidth/cost calculator. These double as oracles for the simulator.

mod churn;
mod cost;
mod probability;

use thiserror::Error;

pub use churn::{churn_false_positive_rate, ChurnInput};
pub use cost::{attack_cost, CostModelInput, CostReport};
pub use probability::{
    binomial_spectrum, collision_probability, estimate_p_addr_avg, hypergeom, overlap_spectrum, p_addr, p_tx,
    success_probability, two_tuple_false_candidates, SuccessModelInput, TESTNET_P3,
};

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("{name} = {value} is outside [0, 1]")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("empty {0}")]
    EmptyTable(&'static str),
}
