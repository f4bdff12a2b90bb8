//! Group-relative advantages, the clipped surrogate with KL penalty, and
//! the filtered behavior cloning objective. Losses are minimized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::policy::{self, CandidateSample, CandidateSet, PolicyError, PolicyParams};
use crate::trajectory::StateContext;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("group of size {0} is too small (need at least 2)")]
    GroupTooSmall(usize),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: &'static str },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Floor below which a group's reward spread counts as degenerate.
pub const STD_FLOOR: f64 = 1e-12;
pub const RATIO_MIN: f64 = 1e-6;
pub const RATIO_MAX: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageMode {
    MeanStd,
    MeanOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GRPOConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub learning_rate: f64,
    pub advantage_mode: AdvantageMode,
    pub groups_per_update: usize,
}

impl Default for GRPOConfig {
    fn default() -> Self {
        GRPOConfig {
            group_size: 8,
            clip_eps: 0.2,
            kl_beta: 0.01,
            learning_rate: 0.5,
            advantage_mode: AdvantageMode::MeanStd,
            groups_per_update: 1,
        }
    }
}

impl GRPOConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(GrpoError::InvalidConfig {
                key: "clip_eps",
                reason: "must lie in (0, 1)",
            });
        }
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return Err(GrpoError::InvalidConfig {
                key: "kl_beta",
                reason: "must be >= 0",
            });
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(GrpoError::InvalidConfig {
                key: "learning_rate",
                reason: "must be > 0",
            });
        }
        if self.groups_per_update == 0 {
            return Err(GrpoError::InvalidConfig {
                key: "groups_per_update",
                reason: "must be >= 1",
            });
        }
        Ok(())
    }
}

/// Centered (and in `MeanStd` mode, scaled) rewards. Uses the population
/// standard deviation; a degenerate group gets all-zero advantages.
pub fn compute_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>, GrpoError> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    match mode {
        AdvantageMode::MeanOnly => Ok(centered),
        AdvantageMode::MeanStd => {
            let var = centered.iter().map(|c| c * c).sum::<f64>() / n as f64;
            let std = var.sqrt();
            if std < STD_FLOOR {
                Ok(vec![0.0; n])
            } else {
                Ok(centered.iter().map(|c| c / std).collect())
            }
        }
    }
}

/// One state's sampled candidates with their rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub state: StateContext,
    pub candidates: CandidateSet,
    pub samples: Vec<CandidateSample>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl CandidateGroup {
    pub fn new(
        state: StateContext,
        candidates: CandidateSet,
        samples: Vec<CandidateSample>,
        rewards: Vec<f64>,
        mode: AdvantageMode,
    ) -> Result<Self, GrpoError> {
        if samples.len() != rewards.len() {
            return Err(GrpoError::DimensionMismatch {
                expected: samples.len(),
                found: rewards.len(),
            });
        }
        let advantages = compute_advantages(&rewards, mode)?;
        Ok(CandidateGroup {
            state,
            candidates,
            samples,
            rewards,
            advantages,
        })
    }

    pub fn mean_reward(&self) -> f64 {
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

fn check_dims(theta: &PolicyParams, others: &[&PolicyParams]) -> Result<(), GrpoError> {
    for o in others {
        if o.dim() != theta.dim() {
            return Err(GrpoError::DimensionMismatch {
                expected: theta.dim(),
                found: o.dim(),
            });
        }
    }
    Ok(())
}

/// Importance ratio from log-probabilities, with a flag telling whether
/// the safety clamp is active.
fn ratio(lp_new: f64, lp_old: f64) -> (f64, bool) {
    let r = (lp_new - lp_old).exp();
    if r < RATIO_MIN {
        (RATIO_MIN, true)
    } else if r > RATIO_MAX {
        (RATIO_MAX, true)
    } else {
        (r, false)
    }
}

/// Per-candidate ratios of a group under `theta` vs `theta_old`.
pub fn group_ratios(theta: &PolicyParams, theta_old: &PolicyParams, group: &CandidateGroup) -> Result<Vec<f64>, GrpoError> {
    let lp = policy::log_distribution(theta, &group.candidates, 1.0)?;
    let lo = policy::log_distribution(theta_old, &group.candidates, 1.0)?;
    Ok(group.samples.iter().map(|s| ratio(lp[s.index], lo[s.index]).0).collect())
}

pub fn grpo_loss(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    group: &CandidateGroup,
    cfg: &GRPOConfig,
) -> Result<f64, GrpoError> {
    check_dims(theta, &[theta_old, theta_ref])?;
    let eps = cfg.clip_eps;
    let ratios = group_ratios(theta, theta_old, group)?;
    let g = group.samples.len() as f64;
    let surrogate: f64 = ratios
        .iter()
        .zip(&group.advantages)
        .map(|(r, a)| (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a))
        .sum();
    let kl = policy::kl(theta, theta_ref, &group.candidates)?;
    Ok(-surrogate / g + cfg.kl_beta * kl)
}

/// Gradient of one group's loss. A candidate whose clipped term is the
/// active minimum (or whose ratio hit the safety clamp) contributes nothing.
pub fn grpo_group_grad(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    group: &CandidateGroup,
    cfg: &GRPOConfig,
) -> Result<Vec<f64>, GrpoError> {
    check_dims(theta, &[theta_old, theta_ref])?;
    let eps = cfg.clip_eps;
    let set = &group.candidates;
    let lp = policy::log_distribution(theta, set, 1.0)?;
    let lo = policy::log_distribution(theta_old, set, 1.0)?;
    let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
    let mean = policy::expected_features(&probs, set);
    let g = group.samples.len() as f64;

    let mut grad = vec![0.0; theta.dim()];
    for (s, a) in group.samples.iter().zip(&group.advantages) {
        let (r, clamped) = ratio(lp[s.index], lo[s.index]);
        let unclipped = r * a;
        let clipped = r.clamp(1.0 - eps, 1.0 + eps) * a;
        if clamped || clipped < unclipped {
            continue;
        }
        let c = -a * r / g;
        for (gk, (f, m)) in grad.iter_mut().zip(set.features[s.index].0.iter().zip(&mean)) {
            *gk += c * (f - m);
        }
    }
    if cfg.kl_beta > 0.0 {
        let gkl = policy::grad_kl(theta, theta_ref, set)?;
        for (gk, k) in grad.iter_mut().zip(gkl) {
            *gk += cfg.kl_beta * k;
        }
    }
    Ok(grad)
}

/// Mean loss over groups.
pub fn grpo_batch_loss(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    groups: &[CandidateGroup],
    cfg: &GRPOConfig,
) -> Result<f64, GrpoError> {
    let mut total = 0.0;
    for g in groups {
        total += grpo_loss(theta, theta_old, theta_ref, g, cfg)?;
    }
    Ok(total / groups.len().max(1) as f64)
}

/// Exact gradient of the mean loss over `groups`, summed in group order.
pub fn grpo_grad(
    theta: &PolicyParams,
    theta_old: &PolicyParams,
    theta_ref: &PolicyParams,
    groups: &[CandidateGroup],
    cfg: &GRPOConfig,
) -> Result<Vec<f64>, GrpoError> {
    let mut grad = vec![0.0; theta.dim()];
    for g in groups {
        let gg = grpo_group_grad(theta, theta_old, theta_ref, g, cfg)?;
        for (a, b) in grad.iter_mut().zip(gg) {
            *a += b;
        }
    }
    let n = groups.len().max(1) as f64;
    grad.iter_mut().for_each(|x| *x /= n);
    Ok(grad)
}

/// Plain gradient descent, no optimizer state.
pub fn sgd_step(theta: &PolicyParams, grad: &[f64], lr: f64) -> PolicyParams {
    PolicyParams {
        weights: theta.weights.iter().zip(grad).map(|(w, g)| w - lr * g).collect(),
        version: theta.version + 1,
    }
}

/// A state with its reference action for behavior cloning.
#[derive(Debug, Clone, PartialEq)]
pub struct FbcExample {
    pub candidates: CandidateSet,
    pub golden: Action,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbcEval {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub used: usize,
    /// Examples whose golden action is not among the candidates.
    pub skipped: usize,
}

/// Mean negative log-likelihood of the golden actions and its gradient.
pub fn fbc_eval(theta: &PolicyParams, data: &[FbcExample]) -> Result<FbcEval, GrpoError> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; theta.dim()];
    let (mut used, mut skipped) = (0usize, 0usize);
    for ex in data {
        let i = match ex.candidates.index_of(&ex.golden) {
            Ok(i) => i,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let lp = policy::log_distribution(theta, &ex.candidates, 1.0)?;
        loss -= lp[i];
        let g = policy::grad_logprob_index(theta, &ex.candidates, i)?;
        for (a, b) in grad.iter_mut().zip(g) {
            *a -= b;
        }
        used += 1;
    }
    if used > 0 {
        loss /= used as f64;
        grad.iter_mut().for_each(|x| *x /= used as f64);
    }
    Ok(FbcEval {
        loss,
        grad,
        used,
        skipped,
    })
}

pub fn fbc_loss(theta: &PolicyParams, data: &[FbcExample]) -> Result<f64, GrpoError> {
    Ok(fbc_eval(theta, data)?.loss)
}

pub fn fbc_grad(theta: &PolicyParams, data: &[FbcExample]) -> Result<Vec<f64>, GrpoError> {
    Ok(fbc_eval(theta, data)?.grad)
}

#[cfg(test)]
mod tests;
