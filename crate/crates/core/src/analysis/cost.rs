use serde::{Deserialize, Serialize};

use super::AnalysisError;

const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModelInput {
    pub n_servers: u64,
    pub n_candidates: u64,
    pub addr_msg_bytes: u64,
    pub addrs_per_msg: u64,
    pub rebroadcast_period_secs: u64,
    pub days_per_month: u64,
    /// Machines rented by the attacker.
    pub rented_servers: u64,
    pub server_month_price: f64,
    /// Outbound traffic included with each rented machine, GB per month.
    pub included_gb_per_server: f64,
    /// Price per additional 1000 GB.
    pub overage_price_per_1000_gb: f64,
}

impl Default for CostModelInput {
    fn default() -> Self {
        CostModelInput {
            n_servers: 8000,
            n_candidates: 100_000,
            addr_msg_bytes: 325,
            addrs_per_msg: 10,
            rebroadcast_period_secs: 600,
            days_per_month: 30,
            rented_servers: 50,
            server_month_price: 25.0,
            included_gb_per_server: 1000.0,
            overage_price_per_1000_gb: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub bytes_per_round: u64,
    /// Binary gigabytes (2^30 bytes).
    pub traffic_gb_per_period: f64,
    pub rounds_per_month: u64,
    pub traffic_gb_per_month: f64,
    pub rental_cost: f64,
    pub overage_cost: f64,
    pub monthly_cost: f64,
}

pub fn attack_cost(input: &CostModelInput) -> Result<CostReport, AnalysisError> {
    if input.addrs_per_msg == 0 || input.rebroadcast_period_secs == 0 || input.addr_msg_bytes == 0 {
        return Err(AnalysisError::Precondition("message size, batch size and period must be positive".into()));
    }
    let msgs = input.n_candidates.div_ceil(input.addrs_per_msg);
    let bytes = input.n_servers * msgs * input.addr_msg_bytes;
    let per_round = bytes as f64 / GIB;
    let rounds = input.days_per_month * 86_400 / input.rebroadcast_period_secs;
    let month = per_round * rounds as f64;
    let rental = input.rented_servers as f64 * input.server_month_price;
    let included = input.rented_servers as f64 * input.included_gb_per_server;
    let overage = ((month - included).max(0.0) / 1000.0) * input.overage_price_per_1000_gb;
    Ok(CostReport {
        bytes_per_round: bytes,
        traffic_gb_per_period: per_round,
        rounds_per_month: rounds,
        traffic_gb_per_month: month,
        rental_cost: rental,
        overage_cost: overage,
        monthly_cost: rental + overage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameters() {
        let r = attack_cost(&CostModelInput::default()).unwrap();
        assert_eq!(r.bytes_per_round, 26_000_000_000);
        assert_eq!((r.traffic_gb_per_period * 10.0).round() / 10.0, 24.2);
        assert_eq!(r.rounds_per_month, 4320);
        assert!((r.traffic_gb_per_month / 104_544.0 - 1.0).abs() < 1e-3);
        assert_eq!(r.rental_cost, 1250.0);
        assert!((r.overage_cost - 109.2).abs() < 0.5, "{}", r.overage_cost);
        assert!(r.monthly_cost < 1500.0);
    }

    #[test]
    fn zero_candidates_costs_rental_only() {
        let r = attack_cost(&CostModelInput { n_candidates: 0, ..Default::default() }).unwrap();
        assert_eq!(r.bytes_per_round, 0);
        assert_eq!(r.traffic_gb_per_month, 0.0);
        assert_eq!(r.monthly_cost, r.rental_cost);
    }

    #[test]
    fn partial_batch_rounds_up() {
        let r = attack_cost(&CostModelInput { n_candidates: 11, n_servers: 1, ..Default::default() }).unwrap();
        assert_eq!(r.bytes_per_round, 2 * 325);
    }
}
