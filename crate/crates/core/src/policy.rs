//! A generative policy small enough to differentiate by hand.
//!
//! For a prompt class `c` the policy emits filler tokens, each with probability
//! `sigmoid(u_c)`, and otherwise emits a single answer token drawn from
//! `softmax(z_c)` and stops. If every one of the `max_len` positions is a
//! filler, the rollout is truncated: it is unfinished, has length `max_len` and
//! `max_len` filler emissions, so its log-probability is `max_len * log sigmoid(u_c)`.
//! A finished rollout with `k` fillers has length `k + 1` and log-probability
//! `k * log sigmoid(u) + log(1 - sigmoid(u)) + log softmax(z)[answer]`.
//!
//! Parameters are stored flat, class-major: `V` answer logits followed by the
//! verbosity logit, repeated for each class.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("prompt class {class} out of range for {classes} classes")]
    UnknownClass { class: usize, classes: usize },
    #[error("answer token {token} out of range for vocabulary of {vocab}")]
    UnknownToken { token: u32, vocab: usize },
    #[error("max_len must be at least 2, got {0}")]
    MaxLen(u32),
    #[error("gradient has {got} entries, expected {expected}")]
    GradientShape { got: usize, expected: usize },
    #[error("non-finite gradient entry at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("non-finite parameter at index {index}")]
    NonFiniteParam { index: usize },
    #[error("vocabulary must contain at least one token")]
    EmptyVocab,
    #[error("rollout is inconsistent: {0}")]
    MalformedRollout(&'static str),
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log sigmoid(x)`
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 - sigmoid(x))`
pub fn log_one_minus_sigmoid(x: f64) -> f64 {
    -softplus(x)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Versioned parameter snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    vocab_size: usize,
    num_classes: usize,
    values: Vec<f64>,
    version: u64,
}

impl PolicyParams {
    /// Builds version-0 parameters from per-class `(answer_logits, verbosity_logit)`.
    pub fn new(vocab_size: usize, classes: Vec<(Vec<f64>, f64)>) -> Result<Self, PolicyError> {
        if vocab_size == 0 {
            return Err(PolicyError::EmptyVocab);
        }
        let num_classes = classes.len();
        let mut values = Vec::with_capacity(num_classes * (vocab_size + 1));
        for (logits, verbosity) in classes {
            if logits.len() != vocab_size {
                return Err(PolicyError::GradientShape {
                    got: logits.len(),
                    expected: vocab_size,
                });
            }
            values.extend(logits);
            values.push(verbosity);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(PolicyError::NonFiniteParam { index });
        }
        Ok(Self {
            vocab_size,
            num_classes,
            values,
            version: 0,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Same layout and version with replaced values. Used by finite-difference checks.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    fn stride(&self) -> usize {
        self.vocab_size + 1
    }

    fn check_class(&self, class: usize) -> Result<(), PolicyError> {
        if class >= self.num_classes {
            return Err(PolicyError::UnknownClass {
                class,
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    pub fn answer_logits(&self, class: usize) -> &[f64] {
        let start = class * self.stride();
        &self.values[start..start + self.vocab_size]
    }

    pub fn verbosity_logit(&self, class: usize) -> f64 {
        self.values[class * self.stride() + self.vocab_size]
    }

    pub fn answer_index(&self, class: usize, token: usize) -> usize {
        class * self.stride() + token
    }

    pub fn verbosity_index(&self, class: usize) -> usize {
        class * self.stride() + self.vocab_size
    }

    /// Probability that a rollout of `class` emits an answer within `max_len` positions.
    pub fn finish_probability(&self, class: usize, max_len: u32) -> f64 {
        1.0 - (max_len as f64 * log_sigmoid(self.verbosity_logit(class))).exp()
    }

    /// Expected rollout length (in tokens) for `class`.
    pub fn expected_length(&self, class: usize, max_len: u32) -> f64 {
        let q = sigmoid(self.verbosity_logit(class));
        // finished with k fillers has length k + 1; truncation has length max_len
        let mut expected = 0.0;
        let mut mass = 1.0;
        for k in 0..max_len {
            expected += mass * (1.0 - q) * (k + 1) as f64;
            mass *= q;
        }
        expected + mass * max_len as f64
    }
}

/// One sampled sequence together with its behavior-policy bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRollout {
    pub prompt_class: usize,
    /// Filler emissions; equals `length` for a truncated rollout.
    pub filler_count: u32,
    pub answer: Option<u32>,
    pub length: u32,
    pub finished: bool,
    pub behavior_version: u64,
    pub behavior_logps: Vec<f64>,
}

impl ToyRollout {
    pub fn behavior_log_prob(&self) -> f64 {
        self.behavior_logps.iter().sum()
    }
}

/// Samples one rollout for `class` under `params`.
pub fn generate<R: Rng + ?Sized>(
    params: &PolicyParams,
    class: usize,
    max_len: u32,
    rng: &mut R,
) -> Result<ToyRollout, PolicyError> {
    params.check_class(class)?;
    if max_len < 2 {
        return Err(PolicyError::MaxLen(max_len));
    }
    let u = params.verbosity_logit(class);
    let q = sigmoid(u);
    let filler_lp = log_sigmoid(u);
    let mut logps = Vec::new();
    for k in 0..max_len {
        if rng.gen::<f64>() < q {
            logps.push(filler_lp);
            continue;
        }
        let probs = softmax(params.answer_logits(class));
        let answer = WeightedIndex::new(&probs)
            .expect("softmax yields a valid distribution")
            .sample(rng);
        let lsm = log_softmax(params.answer_logits(class));
        logps.push(log_one_minus_sigmoid(u) + lsm[answer]);
        return Ok(ToyRollout {
            prompt_class: class,
            filler_count: k,
            answer: Some(answer as u32),
            length: k + 1,
            finished: true,
            behavior_version: params.version,
            behavior_logps: logps,
        });
    }
    Ok(ToyRollout {
        prompt_class: class,
        filler_count: max_len,
        answer: None,
        length: max_len,
        finished: false,
        behavior_version: params.version,
        behavior_logps: logps,
    })
}

fn check_rollout(params: &PolicyParams, rollout: &ToyRollout) -> Result<(), PolicyError> {
    params.check_class(rollout.prompt_class)?;
    match (rollout.finished, rollout.answer) {
        (true, Some(token)) => {
            if token as usize >= params.vocab_size {
                return Err(PolicyError::UnknownToken {
                    token,
                    vocab: params.vocab_size,
                });
            }
            if rollout.length != rollout.filler_count + 1 {
                return Err(PolicyError::MalformedRollout("finished length must be fillers + 1"));
            }
        }
        (false, None) => {
            if rollout.length != rollout.filler_count {
                return Err(PolicyError::MalformedRollout("truncated length must equal fillers"));
            }
        }
        _ => return Err(PolicyError::MalformedRollout("finished iff an answer is present")),
    }
    Ok(())
}

/// Per-token log-probabilities of `rollout` under `params`.
pub fn token_log_probs(params: &PolicyParams, rollout: &ToyRollout) -> Result<Vec<f64>, PolicyError> {
    check_rollout(params, rollout)?;
    let u = params.verbosity_logit(rollout.prompt_class);
    let mut logps = vec![log_sigmoid(u); rollout.filler_count as usize];
    if let Some(token) = rollout.answer {
        let lsm = log_softmax(params.answer_logits(rollout.prompt_class));
        logps.push(log_one_minus_sigmoid(u) + lsm[token as usize]);
    }
    Ok(logps)
}

/// Sequence log-probability of `rollout` under `params`.
pub fn log_prob(params: &PolicyParams, rollout: &ToyRollout) -> Result<f64, PolicyError> {
    check_rollout(params, rollout)?;
    let class = rollout.prompt_class;
    let u = params.verbosity_logit(class);
    let fillers = rollout.filler_count as f64 * log_sigmoid(u);
    Ok(match rollout.answer {
        Some(token) => {
            fillers
                + log_one_minus_sigmoid(u)
                + log_softmax(params.answer_logits(class))[token as usize]
        }
        None => fillers,
    })
}

/// Gradient of [`log_prob`] with respect to every parameter (flat layout).
pub fn grad_log_prob(params: &PolicyParams, rollout: &ToyRollout) -> Result<Vec<f64>, PolicyError> {
    let mut grad = vec![0.0; params.num_params()];
    accumulate_grad_log_prob(params, rollout, 1.0, &mut grad)?;
    Ok(grad)
}

/// Adds `scale * grad log_prob(rollout)` into `out`, touching only the rollout's class.
pub fn accumulate_grad_log_prob(
    params: &PolicyParams,
    rollout: &ToyRollout,
    scale: f64,
    out: &mut [f64],
) -> Result<(), PolicyError> {
    check_rollout(params, rollout)?;
    let class = rollout.prompt_class;
    let q = sigmoid(params.verbosity_logit(class));
    let k = rollout.filler_count as f64;
    let finished = if rollout.finished { 1.0 } else { 0.0 };
    out[params.verbosity_index(class)] += scale * (k - (k + finished) * q);
    if let Some(token) = rollout.answer {
        let probs = softmax(params.answer_logits(class));
        for (v, p) in probs.iter().enumerate() {
            let onehot = if v == token as usize { 1.0 } else { 0.0 };
            out[params.answer_index(class, v)] += scale * (onehot - p);
        }
    }
    Ok(())
}

/// Gradient ascent step: `params + step_size * gradient`, version bumped by one.
pub fn apply_update(
    params: &PolicyParams,
    gradient: &[f64],
    step_size: f64,
) -> Result<PolicyParams, PolicyError> {
    if gradient.len() != params.num_params() {
        return Err(PolicyError::GradientShape {
            got: gradient.len(),
            expected: params.num_params(),
        });
    }
    if let Some(index) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(PolicyError::NonFiniteGradient { index });
    }
    let values: Vec<f64> = params
        .values
        .iter()
        .zip(gradient)
        .map(|(p, g)| p + step_size * g)
        .collect();
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(PolicyError::NonFiniteParam { index });
    }
    Ok(PolicyParams {
        values,
        version: params.version + 1,
        ..params.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(vocab: usize, logits: Vec<f64>, u: f64) -> PolicyParams {
        PolicyParams::new(vocab, vec![(logits, u)]).unwrap()
    }

    fn finished(k: u32, token: u32) -> ToyRollout {
        ToyRollout {
            prompt_class: 0,
            filler_count: k,
            answer: Some(token),
            length: k + 1,
            finished: true,
            behavior_version: 0,
            behavior_logps: vec![],
        }
    }

    fn truncated(len: u32) -> ToyRollout {
        ToyRollout {
            prompt_class: 0,
            filler_count: len,
            answer: None,
            length: len,
            finished: false,
            behavior_version: 0,
            behavior_logps: vec![],
        }
    }

    #[test]
    fn log_prob_hand_value() {
        let p = params(2, vec![0.0, 0.0], 0.0);
        let lp = log_prob(&p, &finished(0, 1)).unwrap();
        assert!((lp - 2.0 * 0.5f64.ln()).abs() < 1e-15);
        assert!((lp + 1.386_294_361_119_890_6).abs() < 1e-12);
    }

    #[test]
    fn enumeration_sums_to_one() {
        let max_len = 4;
        let p = params(2, vec![0.3, -1.1], 0.7);
        let mut total = 0.0;
        for k in 0..max_len {
            for a in 0..2 {
                total += log_prob(&p, &finished(k, a)).unwrap().exp();
            }
        }
        total += log_prob(&p, &truncated(max_len)).unwrap().exp();
        assert!((total - 1.0).abs() < 1e-12, "total {total}");
    }

    #[test]
    fn generated_rollouts_are_self_consistent() {
        let p = params(4, vec![0.5, 0.0, -0.5, 1.0], 1.5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let r = generate(&p, 0, 8, &mut rng).unwrap();
            let lp = log_prob(&p, &r).unwrap();
            assert!((lp - r.behavior_log_prob()).abs() < 1e-12);
            assert_eq!(r.behavior_logps.len(), r.length as usize);
            assert_eq!(token_log_probs(&p, &r).unwrap(), r.behavior_logps);
            assert!(r.length <= 8);
        }
    }

    #[test]
    fn degenerate_verbosity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let terse = params(2, vec![0.0, 0.0], f64::MIN);
        let chatty = params(2, vec![0.0, 0.0], 800.0);
        for _ in 0..100 {
            let r = generate(&terse, 0, 16, &mut rng).unwrap();
            assert_eq!((r.filler_count, r.length, r.finished), (0, 1, true));
            let r = generate(&chatty, 0, 16, &mut rng).unwrap();
            assert_eq!((r.length, r.finished, r.answer), (16, false, None));
        }
    }

    #[test]
    fn geometric_filler_count() {
        let p = params(2, vec![0.0, 0.0], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| generate(&p, 0, 64, &mut rng).unwrap().filler_count as f64)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn expected_length_matches_enumeration() {
        let p = params(2, vec![0.0, 0.0], 1.3);
        let max_len = 6;
        let mut e = 0.0;
        for k in 0..max_len {
            for a in 0..2 {
                let r = finished(k, a);
                e += log_prob(&p, &r).unwrap().exp() * r.length as f64;
            }
        }
        e += log_prob(&p, &truncated(max_len)).unwrap().exp() * max_len as f64;
        assert!((p.expected_length(0, max_len) - e).abs() < 1e-12);
        assert!(
            (p.finish_probability(0, max_len) - (1.0 - log_prob(&p, &truncated(max_len)).unwrap().exp())).abs()
                < 1e-12
        );
    }

    fn finite_difference(p: &PolicyParams, r: &ToyRollout, i: usize) -> f64 {
        let h = 1e-6;
        let mut plus = p.values().to_vec();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        (log_prob(&p.with_values(plus), r).unwrap() - log_prob(&p.with_values(minus), r).unwrap()) / (2.0 * h)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let p = PolicyParams::new(
            3,
            vec![(vec![0.2, -0.4, 1.0], 0.8), (vec![0.0, 0.5, -0.5], -0.3)],
        )
        .unwrap();
        let cases = [
            finished(0, 2),
            finished(5, 0),
            truncated(7),
            ToyRollout {
                prompt_class: 1,
                ..finished(3, 1)
            },
        ];
        for r in &cases {
            let g = grad_log_prob(&p, r).unwrap();
            for i in 0..p.num_params() {
                let fd = finite_difference(&p, r, i);
                let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-5, "param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn truncated_rollout_leaves_answer_head_untouched() {
        let p = params(3, vec![0.1, 0.2, 0.3], 2.0);
        let g = grad_log_prob(&p, &truncated(10)).unwrap();
        assert_eq!(&g[..3], &[0.0, 0.0, 0.0]);
        // all ten positions are fillers: d/du = 10 * (1 - q)
        assert!((g[3] - 10.0 * (1.0 - sigmoid(2.0))).abs() < 1e-12);
    }

    #[test]
    fn verbosity_gradient_at_even_odds() {
        let p = params(2, vec![0.0, 0.0], 0.0);
        let g = grad_log_prob(&p, &finished(1, 0)).unwrap();
        // k - (k + 1) * 0.5 with k = 1
        assert!((g[2] - 0.0).abs() < 1e-15);
        let g = grad_log_prob(&p, &finished(3, 0)).unwrap();
        assert!((g[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn apply_update_bumps_version() {
        let p = params(2, vec![0.0, 0.0], 0.0);
        let same = apply_update(&p, &[0.0; 3], 0.5).unwrap();
        assert_eq!(same.values(), p.values());
        assert_eq!(same.version(), 1);
        let frozen = apply_update(&same, &[1.0, 2.0, 3.0], 0.0).unwrap();
        assert_eq!(frozen.values(), p.values());
        assert_eq!(frozen.version(), 2);
        let moved = apply_update(&frozen, &[1.0, 2.0, 3.0], 0.5).unwrap();
        assert_eq!(moved.values(), &[0.5, 1.0, 1.5]);
        assert_eq!(
            apply_update(&p, &[0.0, f64::NAN, 0.0], 1.0),
            Err(PolicyError::NonFiniteGradient { index: 1 })
        );
        assert!(matches!(
            apply_update(&p, &[0.0], 1.0),
            Err(PolicyError::GradientShape { .. })
        ));
    }

    #[test]
    fn shape_mismatches_rejected() {
        let p = params(2, vec![0.0, 0.0], 0.0);
        assert!(matches!(
            log_prob(&p, &finished(0, 5)),
            Err(PolicyError::UnknownToken { .. })
        ));
        let other = ToyRollout {
            prompt_class: 3,
            ..finished(0, 0)
        };
        assert!(matches!(log_prob(&p, &other), Err(PolicyError::UnknownClass { .. })));
        let mut bad = finished(2, 0);
        bad.answer = None;
        assert!(log_prob(&p, &bad).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(generate(&p, 0, 1, &mut rng), Err(PolicyError::MaxLen(1)));
    }
}
