use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Exp, LogNormal};
use serde::{Deserialize, Serialize};

use super::NetsimError;
use crate::protocol::{Millis, ADDR_DB_CAPACITY};

/// One-way per-hop latency distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyDist {
    Constant { ms: u64 },
    Lognormal { median_ms: f64, sigma: f64 },
    /// Weighted point masses `(latency_ms, weight)`.
    Empirical { bins: Vec<(u64, f64)> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayModel {
    pub latency: LatencyDist,
    /// Added to every message on top of the link latency.
    #[serde(default)]
    pub processing_ms: u64,
}

impl Default for DelayModel {
    /// Median one-way delay of a couple of hundred milliseconds with a heavy
    /// right tail, roughly what the public network shows.
    fn default() -> Self {
        DelayModel { latency: LatencyDist::Lognormal { median_ms: 200.0, sigma: 0.6 }, processing_ms: 5 }
    }
}

impl DelayModel {
    pub fn constant(ms: u64) -> Self {
        DelayModel { latency: LatencyDist::Constant { ms }, processing_ms: 0 }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        let bad = |m: &str| Err(NetsimError::InvalidConfig(format!("delay_model: {m}")));
        match &self.latency {
            LatencyDist::Constant { .. } => Ok(()),
            LatencyDist::Lognormal { median_ms, sigma } => {
                if !(median_ms.is_finite() && *median_ms > 0.0) {
                    return bad("median_ms must be positive");
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return bad("sigma must be non-negative");
                }
                Ok(())
            }
            LatencyDist::Empirical { bins } => {
                if bins.is_empty() || bins.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
                    return bad("empirical bins must be non-empty with non-negative weights");
                }
                if bins.iter().all(|(_, w)| *w == 0.0) {
                    return bad("empirical weights sum to zero");
                }
                Ok(())
            }
        }
    }

    /// Samples a link latency. Always at least 1 ms.
    pub fn sample_latency<R: Rng + ?Sized>(&self, rng: &mut R) -> Millis {
        let ms = match &self.latency {
            LatencyDist::Constant { ms } => *ms,
            LatencyDist::Lognormal { median_ms, sigma } => {
                let d = LogNormal::new(median_ms.ln(), *sigma).expect("validated");
                d.sample(rng).round() as u64
            }
            LatencyDist::Empirical { bins } => {
                let w = WeightedIndex::new(bins.iter().map(|b| b.1)).expect("validated");
                bins[w.sample(rng)].0
            }
        };
        ms.max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionDist {
    Exponential { mean_s: f64 },
    Lognormal { median_s: f64, sigma: f64 },
}

impl SessionDist {
    pub fn sample_secs<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SessionDist::Exponential { mean_s } => Exp::new(1.0 / mean_s).expect("validated").sample(rng),
            SessionDist::Lognormal { median_s, sigma } => {
                LogNormal::new(median_s.ln(), *sigma).expect("validated").sample(rng)
            }
        }
    }

    fn validate(&self) -> Result<(), NetsimError> {
        let ok = match self {
            SessionDist::Exponential { mean_s } => mean_s.is_finite() && *mean_s > 0.0,
            SessionDist::Lognormal { median_s, sigma } => median_s.is_finite() && *median_s > 0.0 && *sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(NetsimError::InvalidConfig("churn_model.session: bad parameters".into()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnModel {
    /// Random client sessions started per hour (0 disables).
    #[serde(default)]
    pub client_arrivals_per_hour: f64,
    #[serde(default = "default_session")]
    pub session: SessionDist,
    /// `(Δt seconds, P(entry connection closed by Δt))`, monotone in both
    /// columns. Past the last row the connection is assumed to stay up.
    #[serde(default)]
    pub disconnect_curve: Vec<(u64, f64)>,
}

fn default_session() -> SessionDist {
    SessionDist::Exponential { mean_s: 3600.0 }
}

impl Default for ChurnModel {
    fn default() -> Self {
        ChurnModel { client_arrivals_per_hour: 0.0, session: default_session(), disconnect_curve: Vec::new() }
    }
}

impl ChurnModel {
    pub fn is_static(&self) -> bool {
        self.client_arrivals_per_hour == 0.0 && self.disconnect_curve.is_empty()
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        if !(self.client_arrivals_per_hour.is_finite() && self.client_arrivals_per_hour >= 0.0) {
            return Err(NetsimError::InvalidConfig("churn_model.client_arrivals_per_hour must be >= 0".into()));
        }
        self.session.validate()?;
        let mut last = (0u64, 0.0f64);
        for &(t, p) in &self.disconnect_curve {
            if !(0.0..=1.0).contains(&p) {
                return Err(NetsimError::InvalidConfig(format!("churn_model.disconnect_curve: probability {p} outside [0,1]")));
            }
            if t < last.0 || p < last.1 {
                return Err(NetsimError::InvalidConfig("churn_model.disconnect_curve must be non-decreasing".into()));
            }
            last = (t, p);
        }
        Ok(())
    }

    /// Inverse-CDF draw of a connection lifetime; `None` means it outlives
    /// the tabulated range. Linear interpolation between rows.
    pub fn sample_link_lifetime<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Millis> {
        if self.disconnect_curve.is_empty() {
            return None;
        }
        let u: f64 = rng.random();
        let mut prev = (0u64, 0.0f64);
        for &(t, p) in &self.disconnect_curve {
            if u < p {
                let span = p - prev.1;
                let frac = if span > 0.0 { (u - prev.1) / span } else { 0.0 };
                let secs = prev.0 as f64 + frac * (t - prev.0) as f64;
                return Some(((secs * 1000.0) as Millis).max(1));
            }
            prev = (t, p);
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogLevel {
    None,
    #[default]
    Summary,
    All,
}

fn default_outgoing() -> usize {
    8
}
fn default_max_conn() -> usize {
    125
}
fn default_one() -> usize {
    1
}
fn default_db_cap() -> usize {
    ADDR_DB_CAPACITY
}
fn default_knowledge() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub n_servers: usize,
    #[serde(default)]
    pub n_clients: usize,
    #[serde(default = "default_outgoing")]
    pub outgoing_per_peer: usize,
    #[serde(default = "default_max_conn")]
    pub max_connections_per_server: usize,
    /// Extra random server-server links are added until the mean server
    /// degree reaches this value.
    #[serde(default)]
    pub target_mean_degree: Option<f64>,
    #[serde(default)]
    pub delay_model: DelayModel,
    #[serde(default)]
    pub churn_model: ChurnModel,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tor_ban_enabled: bool,
    /// Consecutive clients sharing one public address.
    #[serde(default = "default_one")]
    pub clients_per_nat: usize,
    /// Fraction of clients that connect through an anonymizing proxy.
    #[serde(default)]
    pub proxy_fraction: f64,
    #[serde(default = "default_db_cap")]
    pub addr_db_capacity: usize,
    /// Fraction of server addresses preloaded into each server's database.
    #[serde(default = "default_knowledge")]
    pub server_addr_knowledge: f64,
    #[serde(default)]
    pub log_level: LogLevel,
}

impl WorldConfig {
    pub fn new(n_servers: usize, n_clients: usize, seed: u64) -> Self {
        WorldConfig {
            n_servers,
            n_clients,
            outgoing_per_peer: default_outgoing(),
            max_connections_per_server: default_max_conn(),
            target_mean_degree: None,
            delay_model: DelayModel::default(),
            churn_model: ChurnModel::default(),
            seed,
            tor_ban_enabled: false,
            clients_per_nat: 1,
            proxy_fraction: 0.0,
            addr_db_capacity: ADDR_DB_CAPACITY,
            server_addr_knowledge: 1.0,
            log_level: LogLevel::Summary,
        }
    }

    pub fn validate(&self) -> Result<(), NetsimError> {
        let bad = |m: String| Err(NetsimError::InvalidConfig(m));
        if self.outgoing_per_peer < 1 {
            return bad("outgoing_per_peer must be >= 1".into());
        }
        if self.max_connections_per_server < self.outgoing_per_peer {
            return bad("max_connections_per_server must be >= outgoing_per_peer".into());
        }
        if self.n_servers < self.outgoing_per_peer + 1 {
            return Err(NetsimError::Infeasible(format!(
                "{} servers cannot each pick {} distinct peers",
                self.n_servers, self.outgoing_per_peer
            )));
        }
        if self.clients_per_nat == 0 {
            return bad("clients_per_nat must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.proxy_fraction) {
            return bad("proxy_fraction must be in [0,1]".into());
        }
        if !(0.0..=1.0).contains(&self.server_addr_knowledge) {
            return bad("server_addr_knowledge must be in [0,1]".into());
        }
        if self.addr_db_capacity == 0 {
            return bad("addr_db_capacity must be positive".into());
        }
        if let Some(d) = self.target_mean_degree {
            if !d.is_finite() || d > (self.n_servers - 1) as f64 || d > self.max_connections_per_server as f64 {
                return bad(format!("target_mean_degree {d} not achievable"));
            }
        }
        self.delay_model.validate()?;
        self.churn_model.validate()
    }
}
