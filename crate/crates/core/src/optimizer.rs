//! Group sequence policy optimization.
//!
//! Each rollout carries one importance weight, the length-normalized
//! (geometric-mean) likelihood ratio between the current parameters and the
//! parameters that sampled it. The per-rollout surrogate is
//! `min(s * A, clip(s, 1 - eps_low, 1 + eps_high) * A)`, averaged within a
//! group and then across groups.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{accumulate_grad_log_prob, log_prob, PolicyError, PolicyParams, ToyRollout};

/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_STD_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum OptimizerError {
    #[error("sequence has no tokens")]
    EmptySequence,
    #[error("new and old log-prob vectors differ in length ({new} vs {old})")]
    LengthMismatch { new: usize, old: usize },
    #[error("log-prob at token {index} is not a finite non-positive number")]
    BadLogProb { index: usize },
    #[error("advantages need a group of at least 2 rewards, got {0}")]
    GroupTooSmall(usize),
    #[error("clip: need 0 < eps_low <= eps_high < 1, got eps_low={eps_low} eps_high={eps_high}")]
    ClipBounds { eps_low: f64, eps_high: f64 },
    #[error("group has {rollouts} rollouts but {advantages} advantages")]
    GroupShape { rollouts: usize, advantages: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-token log-probabilities of one sequence under current and behavior parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLogProbs {
    new_logps: Vec<f64>,
    old_logps: Vec<f64>,
}

impl SequenceLogProbs {
    pub fn new(new_logps: Vec<f64>, old_logps: Vec<f64>) -> Result<Self, OptimizerError> {
        if new_logps.is_empty() {
            return Err(OptimizerError::EmptySequence);
        }
        if new_logps.len() != old_logps.len() {
            return Err(OptimizerError::LengthMismatch {
                new: new_logps.len(),
                old: old_logps.len(),
            });
        }
        for (index, lp) in new_logps.iter().chain(&old_logps).enumerate() {
            if !(lp.is_finite() && *lp <= 0.0) {
                return Err(OptimizerError::BadLogProb {
                    index: index % new_logps.len(),
                });
            }
        }
        Ok(Self {
            new_logps,
            old_logps,
        })
    }

    pub fn len(&self) -> usize {
        self.new_logps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_logps.is_empty()
    }
}

/// `exp(mean_t(new_logp[t] - old_logp[t]))`.
pub fn sequence_ratio(lp: &SequenceLogProbs) -> f64 {
    let sum: f64 = lp
        .new_logps
        .iter()
        .zip(&lp.old_logps)
        .map(|(n, o)| n - o)
        .sum();
    (sum / lp.len() as f64).exp()
}

/// Sequence ratio from already-summed log-probabilities.
pub fn sequence_ratio_from_totals(new_total: f64, old_total: f64, length: u32) -> f64 {
    ((new_total - old_total) / length as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
}

impl ClipConfig {
    pub fn new(eps_low: f64, eps_high: f64) -> Result<Self, OptimizerError> {
        let cfg = Self { eps_low, eps_high };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), OptimizerError> {
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(OptimizerError::ClipBounds {
                eps_low: self.eps_low,
                eps_high: self.eps_high,
            });
        }
        Ok(())
    }

    pub fn lower(&self) -> f64 {
        1.0 - self.eps_low
    }

    pub fn upper(&self) -> f64 {
        1.0 + self.eps_high
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMode {
    /// `(r - mean) / (std + 1e-6)` with the population standard deviation.
    #[default]
    Std,
    /// `r - mean` only.
    Mean,
}

/// Group-relative advantages of shaped rewards.
pub fn group_advantages(rewards: &[f64], mode: AdvantageMode) -> Result<Vec<f64>, OptimizerError> {
    if rewards.len() < 2 {
        return Err(OptimizerError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let centered = rewards.iter().map(|r| r - mean);
    Ok(match mode {
        AdvantageMode::Mean => centered.collect(),
        AdvantageMode::Std => {
            let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
            let denom = var.sqrt() + ADVANTAGE_STD_EPS;
            centered.map(|c| c / denom).collect()
        }
    })
}

/// Anything that carries a group of shaped rewards.
pub trait RewardGroup {
    fn shaped_rewards(&self) -> &[f64];

    /// False when every reward in the group is identical.
    fn has_signal(&self) -> bool {
        let r = self.shaped_rewards();
        r.iter().any(|&x| x != r[0])
    }
}

/// Scored group as seen by the trainer: rewards, ratios and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupBatch {
    pub shaped_rewards: Vec<f64>,
    pub ratios: Vec<f64>,
    pub advantages: Vec<f64>,
    pub behavior_version: u64,
}

impl RewardGroup for GroupBatch {
    fn shaped_rewards(&self) -> &[f64] {
        &self.shaped_rewards
    }
}

/// Keeps only groups whose shaped rewards are not all equal, in order.
pub fn filter_zero_advantage<T: RewardGroup>(groups: Vec<T>) -> Vec<T> {
    groups.into_iter().filter(|g| g.has_signal()).collect()
}

/// `min(ratio * A, clip(ratio, 1 - eps_low, 1 + eps_high) * A)`.
pub fn gspo_surrogate(ratio: f64, advantage: f64, clip: &ClipConfig) -> f64 {
    let clipped = ratio.clamp(clip.lower(), clip.upper());
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the unclipped branch of the surrogate is the active one.
///
/// At a kink (both branches equal) the unclipped branch is taken.
pub fn unclipped_branch_active(ratio: f64, advantage: f64, clip: &ClipConfig) -> bool {
    let clipped = ratio.clamp(clip.lower(), clip.upper());
    ratio * advantage <= clipped * advantage
}

/// Mean over groups of the group-mean surrogate. Zero for an empty batch.
pub fn batch_objective(groups: &[GroupBatch], clip: &ClipConfig) -> f64 {
    if groups.is_empty() {
        return 0.0;
    }
    let total: f64 = groups
        .iter()
        .map(|g| {
            let g_size = g.ratios.len() as f64;
            g.ratios
                .iter()
                .zip(&g.advantages)
                .map(|(&s, &a)| gspo_surrogate(s, a, clip))
                .sum::<f64>()
                / g_size
        })
        .sum();
    total / groups.len() as f64
}

/// A filtered group ready for a trainer step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingGroup {
    pub rollouts: Vec<ToyRollout>,
    pub shaped_rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub behavior_version: u64,
}

impl RewardGroup for TrainingGroup {
    fn shaped_rewards(&self) -> &[f64] {
        &self.shaped_rewards
    }
}

impl TrainingGroup {
    fn check(&self) -> Result<(), OptimizerError> {
        if self.rollouts.len() != self.advantages.len() {
            return Err(OptimizerError::GroupShape {
                rollouts: self.rollouts.len(),
                advantages: self.advantages.len(),
            });
        }
        Ok(())
    }

    /// Sequence ratios of every rollout under `params` against its stored behavior log-probs.
    pub fn ratios(&self, params: &PolicyParams) -> Result<Vec<f64>, OptimizerError> {
        self.rollouts
            .iter()
            .map(|r| {
                let lp = log_prob(params, r)?;
                Ok(sequence_ratio_from_totals(lp, r.behavior_log_prob(), r.length))
            })
            .collect()
    }

    /// The trainer's view of the group under `params`.
    pub fn to_batch(&self, params: &PolicyParams) -> Result<GroupBatch, OptimizerError> {
        self.check()?;
        Ok(GroupBatch {
            shaped_rewards: self.shaped_rewards.clone(),
            ratios: self.ratios(params)?,
            advantages: self.advantages.clone(),
            behavior_version: self.behavior_version,
        })
    }
}

/// Objective of a batch of training groups evaluated at `params`.
pub fn training_objective(
    params: &PolicyParams,
    groups: &[TrainingGroup],
    clip: &ClipConfig,
) -> Result<f64, OptimizerError> {
    let batches = groups
        .iter()
        .map(|g| g.to_batch(params))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(batch_objective(&batches, clip))
}

/// Gradient of [`training_objective`] with respect to every policy parameter.
///
/// An active unclipped branch contributes `A * s * (1/|y|) * grad log pi(y)`;
/// a binding clip contributes nothing.
pub fn objective_gradient(
    params: &PolicyParams,
    groups: &[TrainingGroup],
    clip: &ClipConfig,
) -> Result<Vec<f64>, OptimizerError> {
    let mut grad = vec![0.0; params.num_params()];
    if groups.is_empty() {
        return Ok(grad);
    }
    let n_groups = groups.len() as f64;
    for group in groups {
        group.check()?;
        let g_size = group.rollouts.len() as f64;
        let ratios = group.ratios(params)?;
        for ((rollout, &adv), &ratio) in group.rollouts.iter().zip(&group.advantages).zip(&ratios) {
            if adv == 0.0 || !unclipped_branch_active(ratio, adv, clip) {
                continue;
            }
            let scale = adv * ratio / (rollout.length as f64 * g_size * n_groups);
            accumulate_grad_log_prob(params, rollout, scale, &mut grad)?;
        }
    }
    Ok(grad)
}
