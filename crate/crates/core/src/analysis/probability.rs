use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use super::AnalysisError;

fn check_prob(name: &'static str, p: f64) -> Result<(), AnalysisError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(AnalysisError::OutOfRange { name, value: p })
    }
}

/// Probability that at least one of the two responsible links for an
/// advertised address is an attacker link, when `n` of the entry node's `N`
/// links are *not* the attacker's.
pub fn p_addr(n: u64, big_n: u64) -> Result<f64, AnalysisError> {
    if big_n < 2 {
        return Err(AnalysisError::Precondition("N must be at least 2".into()));
    }
    if n > big_n {
        return Err(AnalysisError::Precondition(format!("n = {n} exceeds N = {big_n}")));
    }
    let (n, nn) = (n as f64, big_n as f64);
    Ok(1.0 - (n / nn) * ((n - 1.0).max(0.0) / (nn - 1.0)))
}

/// Probability that an attacker link is the first trickle pick.
pub fn p_tx(m: u64, big_n: u64) -> Result<f64, AnalysisError> {
    if big_n < 1 || m > big_n {
        return Err(AnalysisError::Precondition(format!("need 0 <= m <= N, N >= 1 (m = {m}, N = {big_n})")));
    }
    Ok(m as f64 / big_n as f64)
}

/// `C(q, t)^2 / N^t`: chance that a random top-`q` set and a random
/// fingerprint share some `t`-subset. Not clipped; values above 1 mean the
/// approximation is meaningless.
pub fn collision_probability(q: u64, tuple: u64, big_n: u64) -> Result<f64, AnalysisError> {
    if tuple < 1 || q < tuple || big_n < 1 {
        return Err(AnalysisError::Precondition("need q >= tuple >= 1 and N >= 1".into()));
    }
    Ok((2.0 * ln_binomial(q, tuple) - tuple as f64 * (big_n as f64).ln()).exp())
}

/// Binomial pmf over `0..=n`, in log-space.
pub fn binomial_spectrum(p: f64, n: u64) -> Result<Vec<f64>, AnalysisError> {
    check_prob("p", p)?;
    Ok((0..=n)
        .map(|r| {
            if p == 0.0 {
                return if r == 0 { 1.0 } else { 0.0 };
            }
            if p == 1.0 {
                return if r == n { 1.0 } else { 0.0 };
            }
            (ln_binomial(n, r) + r as f64 * p.ln() + (n - r) as f64 * (1.0 - p).ln()).exp()
        })
        .collect())
}

/// `C(R,q) C(N−R, L−q) / C(N,L)`: exactly `q` marked items when drawing `L`
/// of `N` items of which `R` are marked. Zero outside the support.
pub fn hypergeom(q: u64, l: u64, r: u64, n: u64) -> f64 {
    if l > n || r > n || q > l || q > r || l - q > n - r {
        return 0.0;
    }
    (ln_binomial(r, q) + ln_binomial(n - r, l - q) - ln_binomial(n, l)).exp()
}

/// Entry-node testnet histogram: probability of seeing `L` entry nodes among
/// the first ten relayers, `L = 0..=8`. The zero bucket takes the remainder.
pub const TESTNET_P3: [f64; 9] = [0.04, 0.02, 0.055, 0.1225, 0.245, 0.2125, 0.2125, 0.0925, 0.0];

fn default_entries() -> u64 {
    8
}
fn default_population() -> u64 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessModelInput {
    pub p_addr_avg: f64,
    /// Distribution of `L`, the number of entry nodes among the top-q relayers.
    pub p3: Vec<f64>,
    #[serde(default = "default_entries")]
    pub n_entry: u64,
    /// Population of the inner hypergeometric draw.
    #[serde(default = "default_population")]
    pub population: u64,
}

impl SuccessModelInput {
    pub fn testnet(p_addr_avg: f64) -> Self {
        SuccessModelInput { p_addr_avg, p3: TESTNET_P3.to_vec(), n_entry: 8, population: 10 }
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        check_prob("p_addr_avg", self.p_addr_avg)?;
        if self.p3.len() as u64 != self.n_entry + 1 {
            return Err(AnalysisError::Precondition(format!("p3 needs {} entries", self.n_entry + 1)));
        }
        if self.p3.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(AnalysisError::Precondition("p3 entries must be probabilities".into()));
        }
        let s: f64 = self.p3.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(AnalysisError::Precondition(format!("p3 sums to {s}, not 1")));
        }
        if self.population < self.n_entry {
            return Err(AnalysisError::Precondition("population must be >= n_entry".into()));
        }
        Ok(())
    }
}

/// Distribution of `q`, the number of detected entry nodes among the top-q
/// relayers: `Σ_L Σ_R P2(q; L, R, pop) · P1(R) · P3(L)`.
pub fn overlap_spectrum(input: &SuccessModelInput) -> Result<Vec<f64>, AnalysisError> {
    input.validate()?;
    let p1 = binomial_spectrum(input.p_addr_avg, input.n_entry)?;
    let k = input.n_entry;
    let mut out = vec![0.0; k as usize + 1];
    for (q, slot) in out.iter_mut().enumerate() {
        for (l, p3) in input.p3.iter().enumerate() {
            for (r, p1r) in p1.iter().enumerate() {
                *slot += hypergeom(q as u64, l as u64, r as u64, input.population) * p1r * p3;
            }
        }
    }
    Ok(out)
}

/// Probability that at least `m` detected entry nodes show up among the
/// top-q relayers of a transaction.
pub fn success_probability(m: u64, input: &SuccessModelInput) -> Result<f64, AnalysisError> {
    if m < 1 {
        return Err(AnalysisError::Precondition("M must be >= 1".into()));
    }
    let spec = overlap_spectrum(input)?;
    Ok(spec.iter().skip(m as usize).sum())
}

/// Expected number of wrong clients whose fingerprint shares some pair with a
/// transaction's top-q set: `clients · C(k,2) · C(q,2) / N²`.
pub fn two_tuple_false_candidates(n_clients: u64, n_entry: u64, q: u64, n_servers: u64) -> f64 {
    let pairs = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    n_clients as f64 * pairs(n_entry) * pairs(q) / (n_servers as f64).powi(2)
}

/// Weighted mean of `p_addr(c, c + min(m, cap − c))` over a histogram of
/// existing connection counts `(c, weight)`.
pub fn estimate_p_addr_avg(hist: &[(u64, f64)], m: u64, cap: u64) -> Result<f64, AnalysisError> {
    let total: f64 = hist.iter().map(|h| h.1).sum();
    if hist.is_empty() || total <= 0.0 {
        return Err(AnalysisError::EmptyTable("slot histogram"));
    }
    let mut acc = 0.0;
    for &(c, w) in hist {
        let c = c.min(cap);
        let a = m.min(cap - c);
        let p = if c + a < 2 { 1.0 } else { p_addr(c, c + a)? };
        acc += w * p;
    }
    Ok(acc / total)
}
