//! Step-level credit assignment.
//!
//! For every trajectory in a group:
//!
//! * the outcome reward is discounted backward, `V_out[t] = gamma^(T-t) * R_out`
//!   for `t = 0..=T` (the last entry is the answer step);
//! * process rewards are smoothed backward, `V_proc[T-1] = r[T-1]` and
//!   `V_proc[t] = (1-beta) * r[t] + beta * V_proc[t+1]`.
//!
//! Both value kinds are then pooled over *all* steps of *all* trajectories in
//! the group and standardized with the pool's mean and population standard
//! deviation. Interaction steps mix the two, `lambda * A_out + (1-lambda) *
//! A_proc`; the answer step uses `A_out` alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewards::RewardLedger;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CreditConfig {
    /// Outcome discount, in `(0, 1]`.
    pub gamma: f64,
    /// Process smoothing coefficient, in `[0, 1]`.
    pub beta_smooth: f64,
    /// Weight of the outcome advantage, in `[0, 1]`.
    pub lambda: f64,
    /// Standardization guard.
    pub eps: f64,
}

impl Default for CreditConfig {
    fn default() -> Self {
        CreditConfig {
            gamma: 0.98,
            beta_smooth: 0.5,
            lambda: 0.5,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CreditError {
    #[error("gamma must lie in (0, 1], got {0}")]
    Gamma(f64),
    #[error("beta_smooth must lie in [0, 1], got {0}")]
    Beta(f64),
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error("eps must be positive, got {0}")]
    Eps(f64),
    #[error("non-finite reward in trajectory {0}")]
    NonFinite(usize),
    #[error("group normalization needs at least 2 trajectories, got {0}")]
    GroupTooSmall(usize),
}

impl CreditConfig {
    pub fn validate(&self) -> Result<(), CreditError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(CreditError::Gamma(self.gamma));
        }
        if !(0.0..=1.0).contains(&self.beta_smooth) {
            return Err(CreditError::Beta(self.beta_smooth));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CreditError::Lambda(self.lambda));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(CreditError::Eps(self.eps));
        }
        Ok(())
    }
}

/// Outcome reward and per-step process rewards of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRewards {
    pub outcome: f64,
    pub process: Vec<f64>,
}

impl From<&RewardLedger> for TrajectoryRewards {
    fn from(ledger: &RewardLedger) -> Self {
        TrajectoryRewards {
            outcome: ledger.outcome.total,
            process: ledger.process_rewards(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueSeries {
    /// Length `T + 1`.
    pub v_out: Vec<f64>,
    /// Length `T`.
    pub v_proc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepAdvantages {
    /// Length `T + 1`; the last entry belongs to the answer step.
    pub a_mixed: Vec<f64>,
    pub a_out_norm: Vec<f64>,
    /// Length `T`.
    pub a_proc_norm: Vec<f64>,
}

impl StepAdvantages {
    pub fn num_steps(&self) -> usize {
        self.a_proc_norm.len()
    }
}

pub fn discount_outcome(r_out: f64, num_steps: usize, gamma: f64) -> Vec<f64> {
    (0..=num_steps)
        .map(|t| gamma.powi((num_steps - t) as i32) * r_out)
        .collect()
}

pub fn smooth_process(r_proc: &[f64], beta: f64) -> Vec<f64> {
    let mut out = vec![0.0; r_proc.len()];
    let mut next: Option<f64> = None;
    for (t, &r) in r_proc.iter().enumerate().rev() {
        let v = match next {
            None => r,
            Some(after) => (1.0 - beta) * r + beta * after,
        };
        out[t] = v;
        next = Some(v);
    }
    out
}

pub fn value_series(rewards: &TrajectoryRewards, config: &CreditConfig) -> ValueSeries {
    ValueSeries {
        v_out: discount_outcome(rewards.outcome, rewards.process.len(), config.gamma),
        v_proc: smooth_process(&rewards.process, config.beta_smooth),
    }
}

/// Standardizes `(trajectory, step, value)` triples over the whole pool:
/// `(v - mean) / (std + eps)` with the population standard deviation.
pub fn normalize_over_group(values: &[(usize, usize, f64)], eps: f64) -> Vec<(usize, usize, f64)> {
    let (mean, std) = mean_std(values.iter().map(|v| v.2));
    values
        .iter()
        .map(|&(i, t, v)| (i, t, (v - mean) / (std + eps)))
        .collect()
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Mixed step advantages for every trajectory of one group.
pub fn step_advantages(
    group: &[TrajectoryRewards],
    config: &CreditConfig,
) -> Result<Vec<StepAdvantages>, CreditError> {
    config.validate()?;
    if group.len() < 2 {
        return Err(CreditError::GroupTooSmall(group.len()));
    }
    for (i, traj) in group.iter().enumerate() {
        if !traj.outcome.is_finite() || traj.process.iter().any(|r| !r.is_finite()) {
            return Err(CreditError::NonFinite(i));
        }
    }
    let series: Vec<ValueSeries> = group.iter().map(|r| value_series(r, config)).collect();

    let pool = |pick: fn(&ValueSeries) -> &Vec<f64>| -> Vec<(usize, usize, f64)> {
        series
            .iter()
            .enumerate()
            .flat_map(|(i, s)| pick(s).iter().enumerate().map(move |(t, &v)| (i, t, v)))
            .collect()
    };
    let out_norm = normalize_over_group(&pool(|s| &s.v_out), config.eps);
    let proc_norm = normalize_over_group(&pool(|s| &s.v_proc), config.eps);

    let mut result: Vec<StepAdvantages> = series
        .iter()
        .map(|s| StepAdvantages {
            a_mixed: vec![0.0; s.v_out.len()],
            a_out_norm: vec![0.0; s.v_out.len()],
            a_proc_norm: vec![0.0; s.v_proc.len()],
        })
        .collect();
    for (i, t, a) in out_norm {
        result[i].a_out_norm[t] = a;
    }
    for (i, t, a) in proc_norm {
        result[i].a_proc_norm[t] = a;
    }
    let lambda = config.lambda;
    for adv in &mut result {
        let last = adv.a_proc_norm.len();
        for t in 0..last {
            adv.a_mixed[t] = lambda * adv.a_out_norm[t] + (1.0 - lambda) * adv.a_proc_norm[t];
        }
        adv.a_mixed[last] = adv.a_out_norm[last];
    }
    Ok(result)
}

pub fn step_advantages_for_ledgers(
    ledgers: &[RewardLedger],
    config: &CreditConfig,
) -> Result<Vec<StepAdvantages>, CreditError> {
    let rewards: Vec<TrajectoryRewards> = ledgers.iter().map(TrajectoryRewards::from).collect();
    step_advantages(&rewards, config)
}

/// Trajectory-level group-relative advantages, shared by every token of a
/// trajectory.
pub fn grpo_advantages(group_rewards: &[f64], eps: f64) -> Vec<f64> {
    let (mean, std) = mean_std(group_rewards.iter().copied());
    group_rewards.iter().map(|r| (r - mean) / (std + eps)).collect()
}
