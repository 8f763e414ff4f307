use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;

/// Connection churn at an entry node between two rebroadcasts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChurnInput {
    /// `P(k new non-attacker connections during one interval)`, `k = 0..`.
    pub new_connection_pmf: Vec<f64>,
    /// `P(k non-attacker connections close during one interval)`.
    pub disconnect_pmf: Vec<f64>,
    pub interval_secs: u64,
    /// Attacker links (assumed stable).
    pub m: u64,
    /// Other links at the rebroadcast.
    pub n: u64,
}

impl ChurnInput {
    /// Truncated Poisson tables with the given per-interval means.
    pub fn poisson(m: u64, n: u64, interval_secs: u64, arrival_mean: f64, departure_mean: f64) -> Self {
        let table = |mean: f64| {
            let mut v = Vec::new();
            let mut p = (-mean).exp();
            let mut acc = 0.0;
            for k in 0..64u32 {
                v.push(p);
                acc += p;
                if 1.0 - acc < 1e-12 {
                    break;
                }
                p *= mean / (k + 1) as f64;
            }
            v
        };
        ChurnInput { new_connection_pmf: table(arrival_mean), disconnect_pmf: table(departure_mean), interval_secs, m, n }
    }

    fn validate(&self) -> Result<(), AnalysisError> {
        for (name, t) in [("new_connection_pmf", &self.new_connection_pmf), ("disconnect_pmf", &self.disconnect_pmf)] {
            if t.is_empty() {
                return Err(AnalysisError::EmptyTable(name));
            }
            if t.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || t.iter().sum::<f64>() <= 0.0 {
                return Err(AnalysisError::Precondition(format!("{name} must be non-negative and not all zero")));
            }
        }
        if self.interval_secs == 0 {
            return Err(AnalysisError::Precondition("interval_secs must be positive".into()));
        }
        if self.m + self.n < 2 {
            return Err(AnalysisError::Precondition("need at least two links".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct L {
    rank: f64,
    attacker: bool,
    id: u32,
}

fn top2(links: &[L]) -> [Option<L>; 2] {
    let mut best: [Option<L>; 2] = [None, None];
    for &l in links {
        match best {
            [None, _] => best[0] = Some(l),
            [Some(a), None] => {
                if l.rank < a.rank {
                    best = [Some(l), Some(a)];
                } else {
                    best[1] = Some(l);
                }
            }
            [Some(a), Some(b)] => {
                if l.rank < a.rank {
                    best = [Some(l), Some(a)];
                } else if l.rank < b.rank {
                    best[1] = Some(l);
                }
            }
        }
    }
    best
}

fn one_run<R: Rng>(input: &ChurnInput, intervals: u64, arr: &WeightedIndex<f64>, dep: &WeightedIndex<f64>, rng: &mut R) -> bool {
    let mut links: Vec<L> = (0..input.n + input.m)
        .map(|i| L { rank: rng.random(), attacker: i >= input.n, id: i as u32 })
        .collect();
    let initial: Vec<u32> = top2(&links).iter().flatten().map(|l| l.id).collect();
    let mut next_id = links.len() as u32;
    for _ in 0..intervals {
        let d = dep.sample(rng);
        for _ in 0..d {
            let others: Vec<usize> = (0..links.len()).filter(|&i| !links[i].attacker).collect();
            if others.is_empty() {
                break;
            }
            links.swap_remove(others[rng.random_range(0..others.len())]);
        }
        let a = arr.sample(rng);
        for _ in 0..a {
            links.push(L { rank: rng.random(), attacker: false, id: next_id });
            next_id += 1;
        }
    }
    top2(&links).iter().flatten().any(|l| !l.attacker && !initial.contains(&l.id))
}

/// Fraction of runs in which, after `dt_secs` of churn, one of the two
/// responsible links for a client address is a non-attacker link that was
/// not responsible (hence never received the address) at the rebroadcast.
/// Departures are applied before arrivals in each interval.
pub fn churn_false_positive_rate(input: &ChurnInput, dt_secs: u64, runs: u64, seed: u64) -> Result<f64, AnalysisError> {
    input.validate()?;
    if runs == 0 {
        return Err(AnalysisError::Precondition("runs must be >= 1".into()));
    }
    let arr = WeightedIndex::new(input.new_connection_pmf.iter().copied()).expect("validated");
    let dep = WeightedIndex::new(input.disconnect_pmf.iter().copied()).expect("validated");
    let intervals = dt_secs.div_ceil(input.interval_secs);
    const CHUNK: u64 = 4096;
    let chunks = runs.div_ceil(CHUNK);
    let leaks: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c);
            let len = CHUNK.min(runs - c * CHUNK);
            (0..len).filter(|_| one_run(input, intervals, &arr, &dep, &mut rng)).count() as u64
        })
        .sum();
    Ok(leaks as f64 / runs as f64)
}
