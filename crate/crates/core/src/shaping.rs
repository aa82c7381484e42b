//! Length penalty and difficulty-aware penalty scaling.
//!
//! Rollouts longer than `max_len - buffer` lose reward linearly, reaching -1 at
//! `max_len`. Under [`PenaltyMode::Dap`] the penalty on a correct rollout is
//! scaled by the group's solve rate raised to `gamma`, so hard prompts may run
//! longer; incorrect rollouts get `lambda_f`, and rollouts cut off at the
//! length limit always get the full penalty.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ShapingError {
    #[error("penalty: buffer {buffer} must satisfy 0 < buffer < max_len ({max_len})")]
    Buffer { buffer: u32, max_len: u32 },
    #[error("penalty.gamma must be finite and >= 0, got {0}")]
    Gamma(f64),
    #[error("penalty.lambda_f must lie in [0, 1], got {0}")]
    LambdaF(f64),
    #[error("length {length} outside [1, {max_len}]")]
    Length { length: u32, max_len: u32 },
    #[error("raw reward {0} outside [0, 1]")]
    RawReward(f64),
    #[error("unfinished rollout must have length == max_len")]
    UnfinishedShort,
    #[error("correct flag disagrees with raw reward {0}")]
    Correctness(f64),
    #[error("cannot compute a solve rate for an empty group")]
    EmptyGroup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    /// Plain length penalty, `lambda = 1` for every rollout.
    Lp,
    /// Difficulty-aware length penalty.
    #[default]
    Dap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    pub max_len: u32,
    pub buffer: u32,
    pub gamma: f64,
    pub lambda_f: f64,
    pub mode: PenaltyMode,
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<(), ShapingError> {
        if !(self.buffer > 0 && self.buffer < self.max_len) {
            return Err(ShapingError::Buffer {
                buffer: self.buffer,
                max_len: self.max_len,
            });
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(ShapingError::Gamma(self.gamma));
        }
        if !(0.0..=1.0).contains(&self.lambda_f) {
            return Err(ShapingError::LambdaF(self.lambda_f));
        }
        Ok(())
    }
}

/// What the shaping rule needs to know about one verified rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RolloutOutcome {
    pub length: u32,
    pub finished: bool,
    pub raw_reward: f64,
    pub correct: bool,
}

impl RolloutOutcome {
    /// Checks the outcome invariants against the length limit `max_len`.
    pub fn new(
        length: u32,
        finished: bool,
        raw_reward: f64,
        correct: bool,
        max_len: u32,
    ) -> Result<Self, ShapingError> {
        if length == 0 || length > max_len {
            return Err(ShapingError::Length { length, max_len });
        }
        if !(0.0..=1.0).contains(&raw_reward) {
            return Err(ShapingError::RawReward(raw_reward));
        }
        if !finished && length != max_len {
            return Err(ShapingError::UnfinishedShort);
        }
        if correct != (raw_reward == 1.0) {
            return Err(ShapingError::Correctness(raw_reward));
        }
        Ok(Self {
            length,
            finished,
            raw_reward,
            correct,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStats {
    pub solve_rate: f64,
    pub correct: usize,
    pub group_size: usize,
}

/// Linear penalty inside the buffer zone `(max_len - buffer, max_len]`.
pub fn length_penalty(length: u32, max_len: u32, buffer: u32) -> Result<f64, ShapingError> {
    if length == 0 || length > max_len {
        return Err(ShapingError::Length { length, max_len });
    }
    let onset = max_len - buffer;
    if length > onset {
        Ok((onset as f64 - length as f64) / buffer as f64)
    } else {
        Ok(0.0)
    }
}

/// Fraction of the group with reward exactly 1.
pub fn solve_rate(outcomes: &[RolloutOutcome]) -> Result<GroupStats, ShapingError> {
    if outcomes.is_empty() {
        return Err(ShapingError::EmptyGroup);
    }
    let correct = outcomes.iter().filter(|o| o.correct).count();
    Ok(GroupStats {
        solve_rate: correct as f64 / outcomes.len() as f64,
        correct,
        group_size: outcomes.len(),
    })
}

/// The multiplier applied to the length penalty of one rollout.
pub fn penalty_scale(outcome: &RolloutOutcome, stats: &GroupStats, cfg: &PenaltyConfig) -> f64 {
    match cfg.mode {
        PenaltyMode::Lp => 1.0,
        PenaltyMode::Dap => {
            if outcome.length >= cfg.max_len && !outcome.finished {
                1.0
            } else if outcome.correct {
                stats.solve_rate.powf(cfg.gamma)
            } else {
                cfg.lambda_f
            }
        }
    }
}

/// `raw_reward + lambda * length_penalty`.
pub fn shaped_reward(
    outcome: &RolloutOutcome,
    stats: &GroupStats,
    cfg: &PenaltyConfig,
) -> Result<f64, ShapingError> {
    let penalty = length_penalty(outcome.length, cfg.max_len, cfg.buffer)?;
    Ok(outcome.raw_reward + penalty_scale(outcome, stats, cfg) * penalty)
}

/// Shapes a whole group: computes its solve rate, then every shaped reward.
pub fn shape_group(
    outcomes: &[RolloutOutcome],
    cfg: &PenaltyConfig,
) -> Result<(GroupStats, Vec<f64>), ShapingError> {
    let stats = solve_rate(outcomes)?;
    debug_assert!(
        stats.correct > 0 || outcomes.iter().all(|o| !o.correct),
        "a correct rollout implies a positive solve rate"
    );
    let rewards = outcomes
        .iter()
        .map(|o| shaped_reward(o, &stats, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((stats, rewards))
}
