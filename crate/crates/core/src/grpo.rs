//! Group-relative advantages and the clipped surrogate objective with its
//! exact (sub)gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::types::{Group, Query, Rollout};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub epsilon: f64,
    pub kl_coef: f64,
    /// Lower bound on the group std in the advantage denominator. Zero
    /// keeps uniform-reward groups at exactly zero advantage.
    pub std_floor: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            epsilon: 0.2,
            kl_coef: 0.0,
            std_floor: 0.0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidConfig(format!("epsilon {} must lie in (0, 1)", self.epsilon)));
        }
        if !(self.kl_coef >= 0.0) || !(self.std_floor >= 0.0) {
            return Err(Error::InvalidConfig("kl_coef and std_floor must be >= 0".into()));
        }
        Ok(())
    }
}

/// Z-scores rewards within a group using the population standard deviation.
/// Uniform rewards give exact zeros.
pub fn compute_advantages(rewards: &[f64]) -> Vec<f64> {
    compute_advantages_with_floor(rewards, 0.0)
}

pub fn compute_advantages_with_floor(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    debug_assert!(rewards.len() >= 2, "groups need at least two rewards");
    if rewards.windows(2).all(|w| w[0] == w[1]) {
        return vec![0.0; rewards.len()];
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let denom = std.max(std_floor);
    if denom == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Per-token advantages: each rollout's advantage broadcast over its tokens.
pub fn token_advantages(group: &Group) -> Vec<Vec<f64>> {
    group
        .rollouts
        .iter()
        .zip(&group.advantages)
        .map(|(r, a)| vec![*a; r.len()])
        .collect()
}

pub fn is_effective(group: &Group) -> bool {
    group.is_effective()
}

/// Fraction of groups with at least one non-zero advantage.
pub fn effective_ratio(groups: &[Group]) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    groups.iter().filter(|g| g.is_effective()).count() as f64 / groups.len() as f64
}

/// One training example: a rollout with the advantage it is trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPair {
    pub query: Query,
    pub rollout: Rollout,
    pub advantage: f64,
    pub replayed: bool,
}

impl TrainPair {
    pub fn from_group(group: &Group) -> Vec<TrainPair> {
        group
            .rollouts
            .iter()
            .zip(&group.advantages)
            .map(|(r, a)| TrainPair {
                query: group.query.clone(),
                rollout: r.clone(),
                advantage: *a,
                replayed: false,
            })
            .collect()
    }
}

/// Value, gradient and diagnostics of an objective term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub objective_value: f64,
    pub gradient: Vec<f64>,
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub kl_estimate: f64,
}

impl LossReport {
    pub fn zero(dim: usize) -> Self {
        LossReport {
            objective_value: 0.0,
            gradient: vec![0.0; dim],
            clip_fraction: 0.0,
            mean_ratio: 1.0,
            kl_estimate: 0.0,
        }
    }
}

/// Clipped surrogate averaged over `pairs`:
/// `(1/N) Σ_i (1/|y_i|) Σ_t min(ρ Â, clip(ρ, 1-ε, 1+ε) Â) - β KL`,
/// to be maximized. Forced trigger tokens are excluded from the sums.
pub fn surrogate_objective(pairs: &[TrainPair], current: Policy<'_>, cfg: &ClipConfig) -> Result<LossReport> {
    let dim = current.params().dim();
    let fdim = current.feature_dim();
    let mut report = LossReport::zero(dim);
    if pairs.is_empty() {
        return Ok(report);
    }
    for (i, p) in pairs.iter().enumerate() {
        if let Some((t, lp)) = p.rollout.behavior_logps.iter().enumerate().find(|(_, lp)| **lp > 0.0) {
            return Err(Error::PositiveBehaviorLogp {
                rollout: i,
                token: t,
                value: *lp,
            });
        }
    }

    let n = pairs.len() as f64;
    let (lo, hi) = (1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let mut tokens_total = 0usize;
    let mut clipped_total = 0usize;
    let mut ratio_sum = 0.0;

    for p in pairs {
        let r = &p.rollout;
        let counted: Vec<usize> = (0..r.len()).filter(|t| r.is_policy_token(*t)).collect();
        if counted.is_empty() {
            continue;
        }
        let weight = 1.0 / (n * counted.len() as f64);
        let adv = p.advantage;
        for t in counted {
            let step = current.step(&p.query.context, &r.tokens[..t]);
            let token = r.tokens[t];
            let ratio = (step.logp(token) - r.behavior_logps[t]).exp();
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(lo, hi) * adv;
            let mut scale = 0.0;
            if clipped < unclipped {
                clipped_total += 1;
                report.objective_value += weight * clipped;
            } else {
                report.objective_value += weight * unclipped;
                scale += weight * adv * ratio;
            }
            if cfg.kl_coef > 0.0 {
                let kl = ratio - 1.0 - ratio.ln();
                report.kl_estimate += weight * kl;
                report.objective_value -= cfg.kl_coef * weight * kl;
                scale -= cfg.kl_coef * weight * (ratio - 1.0);
            }
            step.accumulate_grad(token, scale, fdim, &mut report.gradient);
            ratio_sum += ratio;
            tokens_total += 1;
        }
    }
    if tokens_total > 0 {
        report.clip_fraction = clipped_total as f64 / tokens_total as f64;
        report.mean_ratio = ratio_sum / tokens_total as f64;
    }
    Ok(report)
}

/// The surrogate of a single group (`1/G` averaging over its rollouts).
pub fn surrogate_loss(group: &Group, current: Policy<'_>, cfg: &ClipConfig) -> Result<LossReport> {
    surrogate_objective(&TrainPair::from_group(group), current, cfg)
}
