//! Adaptive multi-domain mixture sampling.
//!
//! Domains that complete rollouts slowly fall behind their configured share of
//! the training data. Each time an actor needs a new prompt, every domain gets
//! an adjustment factor `alpha_d = clip(w_d / (n_d / N), lo, hi)` and the domain
//! is drawn with probability proportional to `w_d * alpha_d`. Until
//! `warmup_threshold` completions have been observed the configured weights are
//! used unchanged.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `sum(w_d) == 1` at load time.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

pub const DEFAULT_WARMUP_THRESHOLD: u64 = 50;
pub const DEFAULT_CLIP_LO: f64 = 0.1;
pub const DEFAULT_CLIP_HI: f64 = 10.0;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("domain weight must be positive, got {0}")]
    NonPositiveWeight(f64),
    #[error("completion count {count} exceeds total {total}")]
    CountExceedsTotal { count: u64, total: u64 },
    #[error("weights: expected at least one domain")]
    NoDomains,
    #[error("weights: entry {index} is {value}, every weight must be finite and > 0")]
    InvalidWeight { index: usize, value: f64 },
    #[error("weights: sum is {0}, expected 1 within 1e-9")]
    WeightSum(f64),
    #[error("clip bounds must satisfy 0 < lo < 1 < hi, got lo={lo} hi={hi}")]
    ClipBounds { lo: f64, hi: f64 },
    #[error("domain {domain} out of range for {len} domains")]
    UnknownDomain { domain: usize, len: usize },
    #[error("domain dataset must contain at least one prompt")]
    EmptyDataset,
}

/// Dense index into the configured domain list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DomainId(pub usize);

impl DomainId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for DomainId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Target mixture weights, validated to be strictly positive and sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainWeights(Vec<f64>);

impl DomainWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self, SamplerError> {
        if weights.is_empty() {
            return Err(SamplerError::NoDomains);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !(value.is_finite() && value > 0.0) {
                return Err(SamplerError::InvalidWeight { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(SamplerError::WeightSum(sum));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Live completion counts plus the knobs of the adjustment rule.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    counts: Vec<u64>,
    total: u64,
    pub warmup_threshold: u64,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl SamplerState {
    pub fn new(
        num_domains: usize,
        warmup_threshold: u64,
        clip_lo: f64,
        clip_hi: f64,
    ) -> Result<Self, SamplerError> {
        if num_domains == 0 {
            return Err(SamplerError::NoDomains);
        }
        if !(clip_lo > 0.0 && clip_lo < 1.0 && clip_hi > 1.0 && clip_hi.is_finite()) {
            return Err(SamplerError::ClipBounds {
                lo: clip_lo,
                hi: clip_hi,
            });
        }
        Ok(Self {
            counts: vec![0; num_domains],
            total: 0,
            warmup_threshold,
            clip_lo,
            clip_hi,
        })
    }

    /// State with the default warmup of 50 completions and clip bounds [0.1, 10].
    pub fn with_defaults(num_domains: usize) -> Result<Self, SamplerError> {
        Self::new(
            num_domains,
            DEFAULT_WARMUP_THRESHOLD,
            DEFAULT_CLIP_LO,
            DEFAULT_CLIP_HI,
        )
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn num_domains(&self) -> usize {
        self.counts.len()
    }

    /// Counts `k` completed rollouts for `domain`.
    pub fn record_completion(&mut self, domain: DomainId, k: u64) -> Result<(), SamplerError> {
        let len = self.counts.len();
        let slot = self
            .counts
            .get_mut(domain.0)
            .ok_or(SamplerError::UnknownDomain {
                domain: domain.0,
                len,
            })?;
        *slot += k;
        self.total += k;
        Ok(())
    }

    /// Empirical completed share per domain; zeros before the first completion.
    pub fn shares(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len()];
        }
        let total = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }
}

/// `clip(weight / (count / total), clip_lo, clip_hi)`, or `clip_hi` when the
/// domain has no completions yet.
pub fn adjustment_factor(
    weight: f64,
    count: u64,
    total: u64,
    clip_lo: f64,
    clip_hi: f64,
) -> Result<f64, SamplerError> {
    if !(weight > 0.0) {
        return Err(SamplerError::NonPositiveWeight(weight));
    }
    if total < count {
        return Err(SamplerError::CountExceedsTotal { count, total });
    }
    if count == 0 {
        return Ok(clip_hi);
    }
    let share = count as f64 / total as f64;
    Ok((weight / share).clamp(clip_lo, clip_hi))
}

/// Sampling distribution over domains for the next prompt.
///
/// Returns the weights unchanged while `state.total() < warmup_threshold`.
pub fn domain_probabilities(weights: &DomainWeights, state: &SamplerState) -> Vec<f64> {
    debug_assert_eq!(weights.len(), state.num_domains());
    if state.total < state.warmup_threshold {
        return weights.0.clone();
    }
    let scaled: Vec<f64> = weights
        .0
        .iter()
        .zip(&state.counts)
        .map(|(&w, &n)| {
            // weights and counts are validated, so the factor cannot fail here
            let alpha = adjustment_factor(w, n, state.total, state.clip_lo, state.clip_hi)
                .expect("validated sampler inputs");
            w * alpha
        })
        .collect();
    let norm: f64 = scaled.iter().sum();
    scaled.into_iter().map(|x| x / norm).collect()
}

/// Categorical draw from `probs`.
pub fn sample_domain<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> DomainId {
    let dist = WeightedIndex::new(probs).expect("probabilities must be non-negative with positive sum");
    DomainId(dist.sample(rng))
}

/// Uniform prompt index in `[0, dataset_size)`, with replacement.
pub fn sample_prompt<R: Rng + ?Sized>(dataset_size: usize, rng: &mut R) -> Result<usize, SamplerError> {
    if dataset_size == 0 {
        return Err(SamplerError::EmptyDataset);
    }
    Ok(rng.gen_range(0..dataset_size))
}

/// Whether the sampler corrects for drift or always uses the configured weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    Adaptive,
    Static,
}

/// Weights, counts and mode bundled for use inside the pipeline.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    weights: DomainWeights,
    state: SamplerState,
    mode: SamplingMode,
}

impl MixtureSampler {
    pub fn new(weights: DomainWeights, state: SamplerState, mode: SamplingMode) -> Result<Self, SamplerError> {
        if weights.len() != state.num_domains() {
            return Err(SamplerError::UnknownDomain {
                domain: weights.len(),
                len: state.num_domains(),
            });
        }
        Ok(Self {
            weights,
            state,
            mode,
        })
    }

    pub fn weights(&self) -> &DomainWeights {
        &self.weights
    }

    pub fn state(&self) -> &SamplerState {
        &self.state
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn probabilities(&self) -> Vec<f64> {
        match self.mode {
            SamplingMode::Adaptive => domain_probabilities(&self.weights, &self.state),
            SamplingMode::Static => self.weights.as_slice().to_vec(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DomainId {
        sample_domain(&self.probabilities(), rng)
    }

    pub fn record_completion(&mut self, domain: DomainId, k: u64) -> Result<(), SamplerError> {
        self.state.record_completion(domain, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state_with(counts: &[u64]) -> SamplerState {
        let mut s = SamplerState::with_defaults(counts.len()).unwrap();
        for (d, &c) in counts.iter().enumerate() {
            if c > 0 {
                s.record_completion(DomainId(d), c).unwrap();
            }
        }
        s
    }

    #[test]
    fn adjustment_factor_table() {
        assert_eq!(adjustment_factor(0.4, 40, 100, 0.1, 10.0).unwrap(), 1.0);
        assert_eq!(adjustment_factor(0.4, 2, 100, 0.1, 10.0).unwrap(), 10.0);
        assert_eq!(adjustment_factor(0.1, 0, 37, 0.1, 10.0).unwrap(), 10.0);
        let a = adjustment_factor(0.1, 90, 100, 0.1, 10.0).unwrap();
        assert!((a - 0.1 / 0.9).abs() < 1e-12);
        assert_eq!(adjustment_factor(0.1, 100, 100, 0.5, 10.0).unwrap(), 0.5);
    }

    #[test]
    fn adjustment_factor_rejects_contract_violations() {
        assert_eq!(
            adjustment_factor(0.0, 1, 2, 0.1, 10.0),
            Err(SamplerError::NonPositiveWeight(0.0))
        );
        assert!(adjustment_factor(-0.1, 1, 2, 0.1, 10.0).is_err());
        assert_eq!(
            adjustment_factor(0.5, 3, 2, 0.1, 10.0),
            Err(SamplerError::CountExceedsTotal { count: 3, total: 2 })
        );
    }

    #[test]
    fn probabilities_hand_example() {
        let w = DomainWeights::new(vec![0.5, 0.5]).unwrap();
        let p = domain_probabilities(&w, &state_with(&[20, 80]));
        assert!((p[0] - 0.8).abs() < 1e-12);
        assert!((p[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn warmup_passes_weights_through() {
        let w = DomainWeights::new(vec![0.4, 0.6]).unwrap();
        let p = domain_probabilities(&w, &state_with(&[0, 49]));
        assert_eq!(p, vec![0.4, 0.6]);
        // the 50th completion switches the rule on
        let p = domain_probabilities(&w, &state_with(&[0, 50]));
        assert!(p[0] > 0.4);
    }

    #[test]
    fn weights_validation() {
        assert_eq!(DomainWeights::new(vec![]), Err(SamplerError::NoDomains));
        assert!(matches!(
            DomainWeights::new(vec![0.5, 0.4]),
            Err(SamplerError::WeightSum(_))
        ));
        assert!(matches!(
            DomainWeights::new(vec![1.0, 0.0]),
            Err(SamplerError::InvalidWeight { index: 1, .. })
        ));
        assert!(DomainWeights::new(vec![0.4, 0.25, 0.15, 0.1, 0.1]).is_ok());
        assert!(SamplerState::new(2, 50, 1.0, 10.0).is_err());
        assert!(SamplerState::new(2, 50, 0.1, 0.9).is_err());
    }

    #[test]
    fn record_completion_bookkeeping() {
        let mut s = SamplerState::with_defaults(2).unwrap();
        s.record_completion(DomainId(1), 8).unwrap();
        assert_eq!(s.counts(), &[0, 8]);
        assert_eq!(s.total(), 8);
        s.record_completion(DomainId(1), 8).unwrap();
        assert_eq!(s.total(), 16);
        s.record_completion(DomainId(0), 3).unwrap();
        assert_eq!(s.counts().iter().sum::<u64>(), s.total());
        assert!(s.record_completion(DomainId(2), 1).is_err());
    }

    #[test]
    fn degenerate_distribution_always_picks_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            assert_eq!(sample_domain(&[1.0, 0.0], &mut rng), DomainId(0));
        }
    }

    #[test]
    fn sample_domain_frequency() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_domain(&[0.8, 0.2], &mut rng) == DomainId(0))
            .count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.8).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn sample_domain_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_domain(&[0.25; 4], &mut rng).0] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // 99.9% quantile of chi-square with 3 degrees of freedom
        assert!(chi2 < 16.266, "chi2 {chi2}");
    }

    #[test]
    fn sample_prompt_uniform_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..100).all(|_| sample_prompt(1, &mut rng).unwrap() == 0));
        assert_eq!(sample_prompt(0, &mut rng), Err(SamplerError::EmptyDataset));

        let n = 100_000;
        let mut counts = [0usize; 10];
        for _ in 0..n {
            counts[sample_prompt(10, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.1).abs() < 0.01);
        }

        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| sample_prompt(3, &mut r).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(42), draw(42));
    }

    #[test]
    fn static_mode_ignores_counts() {
        let w = DomainWeights::new(vec![0.5, 0.5]).unwrap();
        let mut m = MixtureSampler::new(
            w,
            SamplerState::with_defaults(2).unwrap(),
            SamplingMode::Static,
        )
        .unwrap();
        m.record_completion(DomainId(0), 1000).unwrap();
        assert_eq!(m.probabilities(), vec![0.5, 0.5]);
    }

    fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.05f64..1.0, 1..6).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            let mut w: Vec<f64> = raw.iter().map(|x| x / s).collect();
            // push the rounding residue into the last entry
            let residue = 1.0 - w.iter().sum::<f64>();
            *w.last_mut().unwrap() += residue;
            w
        })
    }

    proptest! {
        #[test]
        fn factor_within_bounds(w in 1e-6f64..1.0, count in 0u64..10_000, extra in 0u64..10_000,
                                lo in 0.01f64..0.99, hi in 1.01f64..100.0) {
            let a = adjustment_factor(w, count, count + extra, lo, hi).unwrap();
            prop_assert!(a >= lo && a <= hi);
        }

        #[test]
        fn probabilities_normalized_and_positive(w in weights_strategy(),
                                                 counts in prop::collection::vec(0u64..500, 5)) {
            let weights = DomainWeights::new(w.clone()).unwrap();
            let p = domain_probabilities(&weights, &state_with(&counts[..w.len()]));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn proportional_counts_are_a_fixed_point(w in weights_strategy(), scale in 50u64..2000) {
            // counts exactly proportional to weights: use integer weights on a grid
            let grid: Vec<u64> = w.iter().map(|x| ((x * 20.0).round() as u64).max(1)).collect();
            let total: u64 = grid.iter().sum();
            let exact: Vec<f64> = grid.iter().map(|&g| g as f64 / total as f64).collect();
            let weights = DomainWeights::new(exact.clone());
            prop_assume!(weights.is_ok());
            let counts: Vec<u64> = grid.iter().map(|g| g * scale).collect();
            let p = domain_probabilities(&weights.unwrap(), &state_with(&counts));
            for (a, b) in p.iter().zip(&exact) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn under_represented_domain_is_boosted(w0 in 0.2f64..0.8, share0 in 0.2f64..0.8, total in 200u64..5000) {
            let c0 = (share0 * total as f64).round() as u64;
            let c1 = total - c0;
            let s0 = c0 as f64 / total as f64;
            prop_assume!(c0 > 0 && c1 > 0 && (s0 - w0).abs() > 1e-3);
            let weights = DomainWeights::new(vec![w0, 1.0 - w0]).unwrap();
            let state = state_with(&[c0, c1]);
            let a0 = w0 / s0;
            let a1 = (1.0 - w0) / (1.0 - s0);
            prop_assume!(a0 > 0.1 && a0 < 10.0 && a1 > 0.1 && a1 < 10.0);
            let p = domain_probabilities(&weights, &state);
            if s0 < w0 {
                prop_assert!(p[0] > w0);
            } else {
                prop_assert!(p[1] > 1.0 - w0);
            }
        }
    }
}
