//! Difficulty-adjustment arithmetic and a planner for a low-work replacement
//! chain: re-date blocks so every retarget hits the lower clamp until the
//! checkpoint floor binds. Difficulties are plain reals; nothing is mined.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RETARGET_INTERVAL: u64 = 2016;
pub const TARGET_TIMESPAN_SECS: u64 = 14 * 86_400;
pub const MEDIAN_WINDOW: usize = 11;
const SECS_PER_DAY: f64 = 86_400.0;
const REL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMeta {
    pub index: u64,
    /// Seconds since the epoch.
    pub timestamp: u64,
    pub difficulty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRule {
    /// Checkpoint date in days since the epoch.
    pub t_c: f64,
    /// Difficulty at the checkpoint.
    pub q_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifficultyPlan {
    pub blocks: Vec<BlockMeta>,
    pub total_work: f64,
    pub cost_in_reference_blocks: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum AltchainError {
    #[error("retarget window must have T2 > T1 (got {t1} .. {t2})")]
    NonIncreasingWindow { t1: u64, t2: u64 },
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("plan infeasible at block {index}: {reason}")]
    Infeasible { index: u64, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub index: u64,
    pub reason: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "block {}: {}", self.index, self.reason)
    }
}

/// Multiplier `clamp(14 days / ΔT, 1/4, 4)`.
pub fn retarget_multiplier(dt_secs: u64) -> f64 {
    (TARGET_TIMESPAN_SECS as f64 / dt_secs as f64).clamp(0.25, 4.0)
}

pub fn retarget(prev_difficulty: f64, t1: u64, t2: u64) -> Result<f64, AltchainError> {
    if t2 <= t1 {
        return Err(AltchainError::NonIncreasingWindow { t1, t2 });
    }
    Ok(prev_difficulty * retarget_multiplier(t2 - t1))
}

fn median(ts: &[u64]) -> Option<u64> {
    if ts.is_empty() {
        return None;
    }
    let mut v = ts.to_vec();
    v.sort_unstable();
    Some(v[v.len() / 2])
}

/// Strictly later than the median of up to eleven previous timestamps.
pub fn median_time_ok(candidate_ts: u64, prev: &[u64]) -> bool {
    debug_assert!(prev.len() <= MEDIAN_WINDOW);
    median(prev).is_none_or(|m| candidate_ts > m)
}

/// Lowest difficulty the checkpoint lets a node accept at date `t_days`.
pub fn checkpoint_floor(t_days: f64, rule: &CheckpointRule) -> Result<f64, AltchainError> {
    if t_days < rule.t_c {
        return Err(AltchainError::Precondition(format!("date {t_days} precedes the checkpoint at {}", rule.t_c)));
    }
    Ok(rule.q_c * 2f64.powf(-(t_days - rule.t_c) / 28.0))
}

fn window(chain: &[BlockMeta], pos: usize) -> Vec<u64> {
    chain[pos.saturating_sub(MEDIAN_WINDOW)..pos].iter().map(|b| b.timestamp).collect()
}

/// Checks retarget arithmetic at every period boundary whose window is
/// present, the median-time rule everywhere and the checkpoint floor as seen
/// by a node at `now_days`.
pub fn validate_chain(blocks: &[BlockMeta], rule: &CheckpointRule, now_days: f64) -> Result<(), Violation> {
    let floor = checkpoint_floor(now_days, rule).map_err(|e| Violation { index: 0, reason: e.to_string() })?;
    let first = blocks.first().map_or(0, |b| b.index);
    for (pos, b) in blocks.iter().enumerate() {
        let v = |reason: String| Err(Violation { index: b.index, reason });
        if b.index != first + pos as u64 {
            return v("indices not contiguous".into());
        }
        if !(b.difficulty.is_finite() && b.difficulty > 0.0) {
            return v("difficulty must be positive".into());
        }
        if pos > 0 && !median_time_ok(b.timestamp, &window(blocks, pos)) {
            return v("timestamp not after median of previous 11".into());
        }
        if pos > 0 {
            let prev = blocks[pos - 1].difficulty;
            let expected = if b.index % RETARGET_INTERVAL == 0 {
                if pos < RETARGET_INTERVAL as usize {
                    None
                } else {
                    let t1 = blocks[pos - RETARGET_INTERVAL as usize].timestamp;
                    let t2 = blocks[pos - 1].timestamp;
                    match retarget(prev, t1, t2) {
                        Ok(d) => Some(d),
                        Err(e) => return v(e.to_string()),
                    }
                }
            } else {
                Some(prev)
            };
            if let Some(e) = expected {
                if (b.difficulty - e).abs() > REL_EPS * e {
                    return v(format!("difficulty {} != expected {}", b.difficulty, e));
                }
            }
        }
        if b.difficulty < floor * (1.0 - REL_EPS) {
            return v(format!("below checkpoint floor ({} < {})", b.difficulty, floor));
        }
    }
    Ok(())
}

/// Builds the replacement chain on top of an honest `history` that ends with
/// the last block of a retarget period (index ≡ 2015 mod 2016). That block is
/// re-dated to `now`; each later period is closed by a block dated `now`
/// (quartering the difficulty) until the next quarter would undercut the
/// checkpoint floor, after which the closing block is dated so the retarget
/// lands on the floor. All other blocks sit one second above the rolling
/// median. `n_blocks` counts the new blocks after the re-dated one.
pub fn plan_alternative_chain(
    history: &[BlockMeta],
    n_blocks: u64,
    now_days: f64,
    rule: &CheckpointRule,
) -> Result<DifficultyPlan, AltchainError> {
    let last = history.last().ok_or_else(|| AltchainError::Precondition("empty history".into()))?;
    let fork = last.index + 1;
    if fork % RETARGET_INTERVAL != 0 {
        return Err(AltchainError::Precondition(format!("history must end at a period boundary (next index {fork})")));
    }
    if history.len() < RETARGET_INTERVAL as usize {
        return Err(AltchainError::Precondition("history must cover a full retarget period".into()));
    }
    if n_blocks < 1 {
        return Err(AltchainError::Precondition("n_blocks must be >= 1".into()));
    }
    let floor = checkpoint_floor(now_days, rule)?;
    let now_ts = (now_days * SECS_PER_DAY) as u64;

    let keep = history.len() - 1;
    let mut chain: Vec<BlockMeta> = history.to_vec();
    chain[keep].timestamp = closing_timestamp(&chain, keep, floor, now_ts);
    if !median_time_ok(chain[keep].timestamp, &window(&chain, keep)) {
        return Err(AltchainError::Infeasible { index: last.index, reason: "now is not after the median".into() });
    }

    for i in fork..fork + n_blocks {
        let pos = chain.len();
        let prev = chain[pos - 1];
        let difficulty = if i % RETARGET_INTERVAL == 0 {
            let t1 = chain[pos - RETARGET_INTERVAL as usize].timestamp;
            retarget(prev.difficulty, t1, prev.timestamp).map_err(|e| AltchainError::Infeasible { index: i, reason: e.to_string() })?
        } else {
            prev.difficulty
        };
        if difficulty < floor * (1.0 - REL_EPS) {
            return Err(AltchainError::Infeasible { index: i, reason: format!("below checkpoint floor ({difficulty} < {floor})") });
        }
        chain.push(BlockMeta { index: i, timestamp: 0, difficulty });
        let timestamp = if i % RETARGET_INTERVAL == RETARGET_INTERVAL - 1 {
            closing_timestamp(&chain, pos, floor, now_ts)
        } else {
            median(&window(&chain, pos)).unwrap_or(0) + 1
        };
        chain[pos].timestamp = timestamp;
    }

    let blocks = chain.split_off(keep);
    let total_work = blocks.iter().map(|b| b.difficulty).sum();
    Ok(DifficultyPlan { blocks, total_work, cost_in_reference_blocks: total_work / rule.q_c })
}

/// Timestamp for the period-closing block at `pos`: `now` while a full
/// quartering stays above the floor, otherwise the smallest whole-second
/// span that keeps the next period on or above it.
fn closing_timestamp(chain: &[BlockMeta], pos: usize, floor: f64, now_ts: u64) -> u64 {
    let difficulty = chain[pos].difficulty;
    let period_start = chain[pos + 1 - RETARGET_INTERVAL as usize].timestamp;
    let med = median(&window(chain, pos)).unwrap_or(0);
    let ts = if difficulty / 4.0 >= floor {
        now_ts
    } else {
        let span = (difficulty * TARGET_TIMESPAN_SECS as f64 / floor).floor() as u64;
        (period_start + span).min(now_ts)
    };
    ts.max(med + 1)
}

/// Work of the plan in units of `reference_difficulty` blocks.
pub fn plan_cost(plan: &DifficultyPlan, reference_difficulty: f64) -> Result<f64, AltchainError> {
    if reference_difficulty.is_nan() || reference_difficulty <= 0.0 {
        return Err(AltchainError::Precondition("reference difficulty must be positive".into()));
    }
    Ok(plan.total_work / reference_difficulty)
}

/// Honest blocks `first..first+len` spaced `spacing_secs` apart, the first
/// dated `start_ts` with `difficulty`. Retargets are applied wherever a full
/// window lies inside the slice, so the result passes [`validate_chain`].
pub fn synthetic_history(first: u64, len: u64, start_ts: u64, spacing_secs: u64, difficulty: f64) -> Vec<BlockMeta> {
    let mut out: Vec<BlockMeta> = Vec::with_capacity(len as usize);
    for k in 0..len as usize {
        let index = first + k as u64;
        let timestamp = start_ts + k as u64 * spacing_secs;
        let difficulty = match out.last() {
            None => difficulty,
            Some(prev) if index.is_multiple_of(RETARGET_INTERVAL) && k >= RETARGET_INTERVAL as usize => {
                retarget(prev.difficulty, out[k - RETARGET_INTERVAL as usize].timestamp, prev.timestamp)
                    .unwrap_or(prev.difficulty)
            }
            Some(prev) => prev.difficulty,
        };
        out.push(BlockMeta { index, timestamp, difficulty });
    }
    out
}

/// The textbook scenario: honest blocks every ten minutes from difficulty
/// `d` up to the period boundary at 252000, a checkpoint at block 250000
/// (difficulty taken from the history), and the attack mounted `days_after`
/// days after the checkpoint.
pub fn checkpoint_scenario(d: f64, checkpoint_day: f64, days_after: f64) -> (Vec<BlockMeta>, CheckpointRule, f64) {
    let cp_index = 250_000u64;
    let fork = 252_000u64;
    let first = fork - 2 * RETARGET_INTERVAL;
    let cp_ts = (checkpoint_day * SECS_PER_DAY) as u64;
    let start = cp_ts - (cp_index - first) * 600;
    let history = synthetic_history(first, fork - first, start, 600, d);
    let q_c = history[(cp_index - first) as usize].difficulty;
    (history, CheckpointRule { t_c: checkpoint_day, q_c }, checkpoint_day + days_after)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DAY: u64 = 86_400;

    #[test]
    fn retarget_clamps() {
        assert_eq!(retarget(8.0, 0, 14 * DAY).unwrap(), 8.0);
        assert_eq!(retarget(8.0, 0, 56 * DAY).unwrap(), 2.0);
        assert_eq!(retarget(8.0, 0, 200 * DAY).unwrap(), 2.0);
        assert_eq!(retarget(8.0, 0, DAY).unwrap(), 32.0);
        assert!(retarget(8.0, 5, 5).is_err());
    }

    #[test]
    fn median_rule() {
        assert!(median_time_ok(101, &[100; 11]));
        assert!(!median_time_ok(100, &[100; 11]));
        let prev: Vec<u64> = (0..11).collect();
        assert!(!median_time_ok(5, &prev));
        assert!(median_time_ok(6, &prev));
        assert!(median_time_ok(0, &[]));
    }

    #[test]
    fn floor_values() {
        let r = CheckpointRule { t_c: 10.0, q_c: 64.0 };
        assert_eq!(checkpoint_floor(10.0, &r).unwrap(), 64.0);
        assert!((checkpoint_floor(38.0, &r).unwrap() - 32.0).abs() < 1e-12);
        let k = 64.0 / checkpoint_floor(144.0, &r).unwrap();
        assert!((k - 2f64.powf(134.0 / 28.0)).abs() < 1e-9);
        assert!((k - 27.6).abs() < 0.05);
        assert!(checkpoint_floor(9.0, &r).is_err());
    }

    fn scenario(n_blocks: u64, days_after: f64) -> (Vec<BlockMeta>, DifficultyPlan, CheckpointRule, f64) {
        let (h, rule, now) = checkpoint_scenario(1.0, 100.0, days_after);
        let plan = plan_alternative_chain(&h, n_blocks, now, &rule).unwrap();
        (h, plan, rule, now)
    }

    fn full_chain(h: &[BlockMeta], plan: &DifficultyPlan) -> Vec<BlockMeta> {
        let mut c = h[..h.len() - 1].to_vec();
        c.extend_from_slice(&plan.blocks);
        c
    }

    #[test]
    fn two_periods_quarter_twice() {
        let (h, plan, rule, now) = scenario(2 * 2016, 134.0);
        let d = h.last().unwrap().difficulty;
        assert_eq!(plan.blocks.len(), 1 + 4032);
        assert!((plan.blocks[1].difficulty - d / 4.0).abs() < 1e-12);
        assert!((plan.blocks[2017].difficulty - d / 16.0).abs() < 1e-12);
        validate_chain(&full_chain(&h, &plan), &rule, now).unwrap();
    }

    #[test]
    fn single_period() {
        let (h, plan, _, _) = scenario(2016, 134.0);
        let d = h.last().unwrap().difficulty;
        assert!(plan.blocks[1..].iter().all(|b| (b.difficulty - d / 4.0).abs() < 1e-12));
    }

    #[test]
    fn textbook_scenario_tail_and_cost() {
        let (h, plan, rule, now) = scenario(25_000, 134.0);
        validate_chain(&full_chain(&h, &plan), &rule, now).unwrap();
        let floor = checkpoint_floor(now, &rule).unwrap();
        let tail = plan.blocks.last().unwrap().difficulty;
        assert!(tail >= floor && tail <= floor * (1.0 + 1e-5));
        let d = h.last().unwrap().difficulty;
        let cost = plan_cost(&plan, d).unwrap();
        let oracle = 1.0 + 2016.0 / 4.0 + 2016.0 / 16.0 + (25_000.0 - 4032.0) * floor / d;
        assert!((cost - oracle).abs() / oracle < 1e-4, "{cost} vs {oracle}");
        assert!(plan_cost(&plan, 30.0).unwrap() < 50.0);
    }

    #[test]
    fn tampering_is_caught() {
        let (h, plan, rule, now) = scenario(4032, 134.0);
        let mut c = full_chain(&h, &plan);
        let b = c.iter().position(|b| b.index == 252_000 + 2016).unwrap();
        c[b].difficulty *= 1.01;
        let v = validate_chain(&c, &rule, now).unwrap_err();
        assert_eq!(v.index, 252_000 + 2016);

        let mut c = full_chain(&h, &plan);
        let floor = checkpoint_floor(now, &rule).unwrap();
        let k = c.len() - 1;
        c[k].difficulty = floor / 2.0;
        let v = validate_chain(&c, &rule, now).unwrap_err();
        assert!(v.reason.contains("below checkpoint floor") || v.reason.contains("expected"), "{v}");
        // A lone block below the floor with no retarget context.
        let lone = [BlockMeta { index: 7, timestamp: 1, difficulty: floor / 2.0 }];
        assert!(validate_chain(&lone, &rule, now).unwrap_err().reason.contains("below checkpoint floor"));
    }

    #[test]
    fn empty_plan_costs_nothing() {
        let p = DifficultyPlan { blocks: vec![], total_work: 0.0, cost_in_reference_blocks: 0.0 };
        assert_eq!(plan_cost(&p, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn clamp_saturates_then_floor_binds() {
        let (_, plan, rule, now) = scenario(12 * 2016, 134.0);
        let floor = checkpoint_floor(now, &rule).unwrap();
        let mut hit_floor = false;
        for w in plan.blocks.windows(2) {
            if w[1].index % RETARGET_INTERVAL != 0 {
                continue;
            }
            let ratio = w[1].difficulty / w[0].difficulty;
            if hit_floor || w[0].difficulty / 4.0 < floor {
                hit_floor = true;
                assert!(w[1].difficulty >= floor && w[1].difficulty <= floor * (1.0 + 1e-5), "{}", w[1].index);
            } else {
                assert!((ratio - 0.25).abs() < 1e-12, "{}", w[1].index);
            }
        }
        assert!(hit_floor);
    }

    #[test]
    fn honest_history_validates() {
        let (h, rule, now) = checkpoint_scenario(3.0, 100.0, 10.0);
        validate_chain(&h, &rule, now).unwrap();
        // 2015 gaps of ten minutes fall just short of two weeks.
        assert!(h.last().unwrap().difficulty > 3.0);
    }

    #[test]
    fn rejects_misaligned_history() {
        let h = synthetic_history(1, 3000, 0, 600, 1.0);
        let r = CheckpointRule { t_c: 0.0, q_c: 1.0 };
        assert!(plan_alternative_chain(&h, 2016, 100.0, &r).is_err());
    }

    proptest! {
        #[test]
        fn plans_validate_and_work_grows(days in 30.0f64..400.0, periods in 1u64..6, extra in 0u64..2016) {
            let n = periods * 2016 + extra;
            let (h, rule, now) = checkpoint_scenario(5.0, 50.0, days);
            let plan = plan_alternative_chain(&h, n, now, &rule).unwrap();
            prop_assert!(validate_chain(&full_chain(&h, &plan), &rule, now).is_ok());
            let shorter = plan_alternative_chain(&h, n - 1, now, &rule).unwrap();
            prop_assert!(plan.total_work > shorter.total_work);
            let floor = checkpoint_floor(now, &rule).unwrap();
            prop_assert!(plan.blocks.iter().all(|b| b.difficulty >= floor * (1.0 - 1e-9)));
        }
    }
}
