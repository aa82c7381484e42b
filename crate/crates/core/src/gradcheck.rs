//! Finite-difference checks of the hand-written gradients.
//!
//! Two families are checked on randomly drawn toy problems:
//! the policy's sequence log-probability gradient, and the gradient of the
//! clipped training objective. Derivatives are compared with central
//! differences; the relative error of one coordinate is
//! `|analytic - numeric| / max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
//!
//! The objective is piecewise smooth: it has kinks where a sequence ratio
//! crosses a clip bound. Batches with a ratio within [`KINK_MARGIN`] of a bound
//! are redrawn, since a central difference straddling a kink measures neither
//! side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::optimizer::{
    group_advantages, objective_gradient, training_objective, AdvantageMode, ClipConfig,
    OptimizerError, TrainingGroup,
};
use crate::policy::{generate, grad_log_prob, log_prob, PolicyError, PolicyParams, ToyRollout};

/// Denominator floor for relative errors of near-zero derivatives.
pub const REL_ERR_FLOOR: f64 = 1e-4;
/// Batches with a ratio this close to a clip bound are redrawn.
pub const KINK_MARGIN: f64 = 1e-5;

const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("could not draw a batch away from the clip kinks in {0} attempts")]
    NoSmoothBatch(usize),
    #[error("corrupted parameter index {index} out of range (largest batch has {params} parameters)")]
    CorruptIndex { index: usize, params: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub batches: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub clip: ClipConfig,
    /// Test hook: deliberately perturb the analytic objective gradient at this
    /// index in every batch that has that many parameters.
    pub corrupt: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            batches: 100,
            step: 1e-6,
            tolerance: 1e-4,
            seed: 0,
            clip: ClipConfig {
                eps_low: 3e-3,
                eps_high: 4e-3,
            },
            corrupt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    LogProb,
    Objective,
}

impl std::fmt::Display for CheckKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CheckKind::LogProb => "log-prob",
            CheckKind::Objective => "objective",
        })
    }
}

/// The coordinate with the largest relative error seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoordinate {
    pub kind: CheckKind,
    pub batch: usize,
    pub param: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub batches: usize,
    pub coordinates: usize,
    pub redrawn: usize,
    pub worst: Option<WorstCoordinate>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.worst.map_or(0.0, |w| w.rel_err)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Central differences of `f` around `params`, one coordinate at a time.
pub fn numeric_gradient<F>(params: &PolicyParams, step: f64, mut f: F) -> Result<Vec<f64>, GradCheckError>
where
    F: FnMut(&PolicyParams) -> Result<f64, GradCheckError>,
{
    let base = params.values().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let hi = f(&params.with_values(plus))?;
        let lo = f(&params.with_values(minus))?;
        out.push((hi - lo) / (2.0 * step));
    }
    Ok(out)
}

/// A random toy problem: behavior parameters, rollouts drawn from them, and
/// nearby current parameters.
#[derive(Debug, Clone)]
pub struct RandomBatch {
    pub behavior: PolicyParams,
    pub current: PolicyParams,
    pub groups: Vec<TrainingGroup>,
}

fn random_params<R: Rng>(rng: &mut R, vocab: usize, classes: usize) -> PolicyParams {
    let spec = (0..classes)
        .map(|_| {
            let logits = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            (logits, rng.gen_range(-1.0..2.5))
        })
        .collect();
    PolicyParams::new(vocab, spec).expect("finite random parameters")
}

/// Draws a batch whose current/behavior ratios straddle the clip range.
pub fn random_batch<R: Rng>(rng: &mut R, clip: &ClipConfig) -> Result<RandomBatch, GradCheckError> {
    let vocab = rng.gen_range(2..=6);
    let classes = rng.gen_range(1..=3);
    let max_len = rng.gen_range(3..=12);
    let behavior = random_params(rng, vocab, classes);
    let n_groups = rng.gen_range(1..=4);
    let group_size = rng.gen_range(2..=8);
    let mut groups = Vec::with_capacity(n_groups);
    for _ in 0..n_groups {
        let class = rng.gen_range(0..classes);
        let rollouts = (0..group_size)
            .map(|_| generate(&behavior, class, max_len, rng))
            .collect::<Result<Vec<ToyRollout>, _>>()?;
        let shaped: Vec<f64> = (0..group_size).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mode = if rng.gen_bool(0.5) {
            AdvantageMode::Std
        } else {
            AdvantageMode::Mean
        };
        groups.push(TrainingGroup {
            advantages: group_advantages(&shaped, mode)?,
            shaped_rewards: shaped,
            behavior_version: behavior.version(),
            rollouts,
        });
    }
    // perturbation on the order of the clip width, so both branches occur
    let noise = Normal::new(0.0, 2.0 * clip.eps_high).expect("valid normal");
    let values = behavior.values().iter().map(|v| v + noise.sample(rng)).collect();
    let current = behavior.with_values(values);
    Ok(RandomBatch {
        behavior,
        current,
        groups,
    })
}

fn near_kink(batch: &RandomBatch, clip: &ClipConfig) -> Result<bool, GradCheckError> {
    for g in &batch.groups {
        for s in g.ratios(&batch.current)? {
            if (s - clip.lower()).abs() < KINK_MARGIN || (s - clip.upper()).abs() < KINK_MARGIN {
                return Ok(true);
            }
        }
    }
    Ok(false)
}

struct Tracker {
    worst: Option<WorstCoordinate>,
    coordinates: usize,
}

impl Tracker {
    fn compare(&mut self, kind: CheckKind, batch: usize, analytic: &[f64], numeric: &[f64]) {
        for (param, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            self.coordinates += 1;
            let rel_err = relative_error(a, n);
            if self.worst.map_or(true, |w| rel_err > w.rel_err) {
                self.worst = Some(WorstCoordinate {
                    kind,
                    batch,
                    param,
                    analytic: a,
                    numeric: n,
                    rel_err,
                });
            }
        }
    }
}

/// Runs both gradient checks over `cfg.batches` random batches.
pub fn run_grad_check(cfg: &GradCheckConfig) -> Result<GradCheckReport, GradCheckError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tracker = Tracker {
        worst: None,
        coordinates: 0,
    };
    let mut redrawn = 0;
    let mut corrupted = false;
    let mut largest = 0;
    for b in 0..cfg.batches {
        let mut attempts = 0;
        let batch = loop {
            let batch = random_batch(&mut rng, &cfg.clip)?;
            if !near_kink(&batch, &cfg.clip)? {
                break batch;
            }
            attempts += 1;
            redrawn += 1;
            if attempts >= MAX_REDRAWS {
                return Err(GradCheckError::NoSmoothBatch(MAX_REDRAWS));
            }
        };

        for rollout in batch.groups.iter().flat_map(|g| &g.rollouts) {
            let analytic = grad_log_prob(&batch.current, rollout)?;
            let numeric = numeric_gradient(&batch.current, cfg.step, |p| Ok(log_prob(p, rollout)?))?;
            tracker.compare(CheckKind::LogProb, b, &analytic, &numeric);
        }

        let mut analytic = objective_gradient(&batch.current, &batch.groups, &cfg.clip)?;
        largest = largest.max(analytic.len());
        if let Some(slot) = cfg.corrupt.and_then(|i| analytic.get_mut(i)) {
            *slot = *slot * 1.01 + 1e-2;
            corrupted = true;
        }
        let numeric = numeric_gradient(&batch.current, cfg.step, |p| {
            Ok(training_objective(p, &batch.groups, &cfg.clip)?)
        })?;
        tracker.compare(CheckKind::Objective, b, &analytic, &numeric);
    }
    if let (Some(index), false) = (cfg.corrupt, corrupted) {
        return Err(GradCheckError::CorruptIndex {
            index,
            params: largest,
        });
    }
    Ok(GradCheckReport {
        tolerance: cfg.tolerance,
        batches: cfg.batches,
        coordinates: tracker.coordinates,
        redrawn,
        worst: tracker.worst,
    })
}
