//! Synthetic verifiable environments.
//!
//! Each domain owns a set of prompt classes (its "dataset"), a reward rule and
//! a service-time model standing in for generation plus verification latency.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{softmax, PolicyParams, ToyRollout};
use crate::sampler::DomainId;

/// Number of constraints checked by [`RewardKind::FractionSatisfied`].
pub const CONSTRAINT_BITS: u32 = 4;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("domain {domain} has no prompt classes")]
    NoClasses { domain: String },
    #[error("domain {domain}: service mean must be finite and > 0, got {mean}")]
    ServiceMean { domain: String, mean: f64 },
    #[error("domain {domain}: correct token {token} outside vocabulary of {vocab}")]
    CorrectToken { domain: String, token: u32, vocab: usize },
    #[error("domain {domain}: fraction rewards need a vocabulary of at most 16 tokens, got {vocab}")]
    FractionVocab { domain: String, vocab: usize },
    #[error("rollout class {class} does not belong to domain {domain}")]
    ForeignClass { class: usize, domain: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    /// Reward 1 iff the answer matches exactly.
    BinaryExactMatch,
    /// Fraction of the answer's low bits that match the reference.
    FractionSatisfied,
    /// Reward 1 iff every test passes, i.e. the answer is exactly right.
    AllTestsPass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ServiceTime {
    Deterministic { mean: f64 },
    Exponential { mean: f64 },
}

impl ServiceTime {
    pub fn mean(&self) -> f64 {
        match *self {
            ServiceTime::Deterministic { mean } | ServiceTime::Exponential { mean } => mean,
        }
    }
}

/// One prompt class of a domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptClass {
    /// Global index into the policy's class table.
    pub class: usize,
    pub correct_token: u32,
    pub difficulty: Difficulty,
    /// Fillers a rollout must emit before its answer can be verified correct.
    pub min_reasoning: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub domain: DomainId,
    pub name: String,
    pub reward_kind: RewardKind,
    pub prompt_classes: Vec<PromptClass>,
    pub service_time: ServiceTime,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifierResult {
    pub raw_reward: f64,
    pub correct: bool,
}

impl EnvSpec {
    pub fn validate(&self, vocab_size: usize) -> Result<(), EnvError> {
        if self.prompt_classes.is_empty() {
            return Err(EnvError::NoClasses {
                domain: self.name.clone(),
            });
        }
        let mean = self.service_time.mean();
        if !(mean.is_finite() && mean > 0.0) {
            return Err(EnvError::ServiceMean {
                domain: self.name.clone(),
                mean,
            });
        }
        for pc in &self.prompt_classes {
            if pc.correct_token as usize >= vocab_size {
                return Err(EnvError::CorrectToken {
                    domain: self.name.clone(),
                    token: pc.correct_token,
                    vocab: vocab_size,
                });
            }
        }
        if self.reward_kind == RewardKind::FractionSatisfied && vocab_size > 1 << CONSTRAINT_BITS {
            return Err(EnvError::FractionVocab {
                domain: self.name.clone(),
                vocab: vocab_size,
            });
        }
        Ok(())
    }

    pub fn class(&self, class: usize) -> Option<&PromptClass> {
        self.prompt_classes.iter().find(|pc| pc.class == class)
    }

    /// Reward of answering `answer` after `fillers` filler tokens on `pc`.
    fn score(&self, pc: &PromptClass, answer: u32, fillers: u32) -> f64 {
        if fillers < pc.min_reasoning {
            return 0.0;
        }
        match self.reward_kind {
            RewardKind::BinaryExactMatch | RewardKind::AllTestsPass => {
                if answer == pc.correct_token {
                    1.0
                } else {
                    0.0
                }
            }
            RewardKind::FractionSatisfied => {
                let mask = (1u32 << CONSTRAINT_BITS) - 1;
                let mismatched = ((answer ^ pc.correct_token) & mask).count_ones();
                (CONSTRAINT_BITS - mismatched) as f64 / CONSTRAINT_BITS as f64
            }
        }
    }

    /// Checks a rollout. Unfinished rollouts score zero.
    pub fn verify(&self, rollout: &ToyRollout) -> Result<VerifierResult, EnvError> {
        let pc = self
            .class(rollout.prompt_class)
            .ok_or_else(|| EnvError::ForeignClass {
                class: rollout.prompt_class,
                domain: self.name.clone(),
            })?;
        let raw_reward = match (rollout.finished, rollout.answer) {
            (true, Some(answer)) => self.score(pc, answer, rollout.filler_count),
            _ => 0.0,
        };
        Ok(VerifierResult {
            raw_reward,
            correct: raw_reward == 1.0,
        })
    }

    /// Simulated time to generate and verify one group.
    pub fn service_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.service_time {
            ServiceTime::Deterministic { mean } => mean,
            ServiceTime::Exponential { mean } => Exp::new(1.0 / mean)
                .expect("validated service mean")
                .sample(rng),
        }
    }

    /// Exact expected raw reward and solve probability of class `pc` under `params`.
    pub fn expected_outcome(&self, pc: &PromptClass, params: &PolicyParams, max_len: u32) -> (f64, f64) {
        let answer_probs = softmax(params.answer_logits(pc.class));
        let q = crate::policy::sigmoid(params.verbosity_logit(pc.class));
        // probability that the answer comes after at least min_reasoning fillers
        let reach = if pc.min_reasoning >= max_len {
            0.0
        } else {
            q.powi(pc.min_reasoning as i32) * (1.0 - q.powi((max_len - pc.min_reasoning) as i32))
        };
        let mut reward = 0.0;
        let mut solve = 0.0;
        for (token, p) in answer_probs.iter().enumerate() {
            let r = self.score(
                &PromptClass {
                    min_reasoning: 0,
                    ..pc.clone()
                },
                token as u32,
                0,
            );
            reward += p * r;
            if r == 1.0 {
                solve += p;
            }
        }
        (reach * reward, reach * solve)
    }

    /// Expected raw reward of the domain, prompts drawn uniformly from its classes.
    pub fn expected_reward(&self, params: &PolicyParams, max_len: u32) -> f64 {
        let n = self.prompt_classes.len() as f64;
        self.prompt_classes
            .iter()
            .map(|pc| self.expected_outcome(pc, params, max_len).0)
            .sum::<f64>()
            / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{generate, log_prob};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn env(kind: RewardKind, service: ServiceTime) -> EnvSpec {
        EnvSpec {
            domain: DomainId(0),
            name: "test".into(),
            reward_kind: kind,
            prompt_classes: vec![PromptClass {
                class: 0,
                correct_token: 0b1010,
                difficulty: Difficulty::Easy,
                min_reasoning: 0,
            }],
            service_time: service,
        }
    }

    fn rollout(answer: Option<u32>, fillers: u32) -> ToyRollout {
        ToyRollout {
            prompt_class: 0,
            filler_count: fillers,
            answer,
            length: if answer.is_some() { fillers + 1 } else { fillers },
            finished: answer.is_some(),
            behavior_version: 0,
            behavior_logps: vec![],
        }
    }

    const DET: ServiceTime = ServiceTime::Deterministic { mean: 2.0 };

    #[test]
    fn exact_match_and_truncation() {
        for kind in [
            RewardKind::BinaryExactMatch,
            RewardKind::AllTestsPass,
            RewardKind::FractionSatisfied,
        ] {
            let e = env(kind, DET);
            assert_eq!(
                e.verify(&rollout(Some(0b1010), 3)).unwrap(),
                VerifierResult {
                    raw_reward: 1.0,
                    correct: true
                }
            );
            assert_eq!(
                e.verify(&rollout(None, 16)).unwrap(),
                VerifierResult {
                    raw_reward: 0.0,
                    correct: false
                }
            );
        }
        let e = env(RewardKind::BinaryExactMatch, DET);
        assert_eq!(e.verify(&rollout(Some(0b1011), 3)).unwrap().raw_reward, 0.0);
    }

    #[test]
    fn fraction_counts_matching_bits() {
        let e = env(RewardKind::FractionSatisfied, DET);
        // 0b0110 vs 0b1010: bits 0 and 1 agree, bits 2 and 3 differ
        let r = e.verify(&rollout(Some(0b0110), 0)).unwrap();
        assert_eq!((r.raw_reward, r.correct), (0.5, false));
        let r = e.verify(&rollout(Some(0b1011), 0)).unwrap();
        assert_eq!((r.raw_reward, r.correct), (0.75, false));
        // brute-force oracle over the whole vocabulary
        for answer in 0..16u32 {
            let agree = (0..4)
                .filter(|b| (answer >> b) & 1 == (0b1010 >> b) & 1)
                .count();
            let r = e.verify(&rollout(Some(answer), 0)).unwrap();
            assert_eq!(r.raw_reward, agree as f64 / 4.0);
            assert_eq!(r.correct, answer == 0b1010);
        }
    }

    #[test]
    fn reasoning_requirement() {
        let mut e = env(RewardKind::BinaryExactMatch, DET);
        e.prompt_classes[0].min_reasoning = 5;
        assert_eq!(e.verify(&rollout(Some(0b1010), 4)).unwrap().raw_reward, 0.0);
        assert_eq!(e.verify(&rollout(Some(0b1010), 5)).unwrap().raw_reward, 1.0);
    }

    #[test]
    fn foreign_class_rejected() {
        let e = env(RewardKind::BinaryExactMatch, DET);
        let mut r = rollout(Some(0), 0);
        r.prompt_class = 7;
        assert!(matches!(e.verify(&r), Err(EnvError::ForeignClass { class: 7, .. })));
    }

    #[test]
    fn validation() {
        assert!(env(RewardKind::FractionSatisfied, DET).validate(16).is_ok());
        assert!(matches!(
            env(RewardKind::FractionSatisfied, DET).validate(32),
            Err(EnvError::FractionVocab { .. })
        ));
        assert!(matches!(
            env(RewardKind::BinaryExactMatch, DET).validate(4),
            Err(EnvError::CorrectToken { .. })
        ));
        assert!(env(
            RewardKind::BinaryExactMatch,
            ServiceTime::Exponential { mean: 0.0 }
        )
        .validate(16)
        .is_err());
        let mut empty = env(RewardKind::AllTestsPass, DET);
        empty.prompt_classes.clear();
        assert!(matches!(empty.validate(16), Err(EnvError::NoClasses { .. })));
    }

    #[test]
    fn deterministic_service() {
        let e = env(RewardKind::BinaryExactMatch, DET);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!((0..100).all(|_| e.service_delay(&mut rng) == 2.0));
    }

    #[test]
    fn exponential_service_mean() {
        let e = env(RewardKind::BinaryExactMatch, ServiceTime::Exponential { mean: 2.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 100_000;
        let mean = (0..n).map(|_| e.service_delay(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn throughput_scales_inversely_with_service_mean() {
        // one dedicated server per domain, equal busy time: completions ~ 1 / mean
        let fast = env(RewardKind::BinaryExactMatch, ServiceTime::Exponential { mean: 1.0 });
        let slow = env(RewardKind::BinaryExactMatch, ServiceTime::Exponential { mean: 5.0 });
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let horizon = 20_000.0;
        let mut served = |e: &EnvSpec| {
            let (mut t, mut n) = (0.0, 0u32);
            loop {
                t += e.service_delay(&mut rng);
                if t > horizon {
                    return n as f64;
                }
                n += 1;
            }
        };
        let ratio = served(&fast) / served(&slow);
        assert!((ratio - 5.0).abs() < 0.3, "ratio {ratio}");
    }

    #[test]
    fn same_seed_same_streams() {
        let e = env(RewardKind::BinaryExactMatch, ServiceTime::Exponential { mean: 1.5 });
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..16).map(|_| e.service_delay(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(99), draw(99));
    }

    #[test]
    fn expected_reward_matches_enumeration() {
        let max_len = 6;
        for kind in [RewardKind::BinaryExactMatch, RewardKind::FractionSatisfied] {
            for min_reasoning in [0, 2] {
                let mut e = env(kind, DET);
                e.prompt_classes[0].min_reasoning = min_reasoning;
                let logits: Vec<f64> = (0..16).map(|v| ((v * 7) % 5) as f64 * 0.3 - 0.6).collect();
                let p = PolicyParams::new(16, vec![(logits, 0.4)]).unwrap();
                let mut reward = 0.0;
                let mut solve = 0.0;
                for k in 0..max_len {
                    for a in 0..16 {
                        let r = rollout(Some(a), k);
                        let prob = log_prob(&p, &r).unwrap().exp();
                        let v = e.verify(&r).unwrap();
                        reward += prob * v.raw_reward;
                        if v.correct {
                            solve += prob;
                        }
                    }
                }
                let (er, es) = e.expected_outcome(&e.prompt_classes[0], &p, max_len);
                assert!((er - reward).abs() < 1e-12);
                assert!((es - solve).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn expected_reward_agrees_with_sampling() {
        let e = env(RewardKind::BinaryExactMatch, DET);
        let mut logits = vec![0.0; 16];
        logits[0b1010] = 2.0;
        let p = PolicyParams::new(16, vec![(logits, 1.0)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 50_000;
        let mean = (0..n)
            .map(|_| e.verify(&generate(&p, 0, 8, &mut rng).unwrap()).unwrap().raw_reward)
            .sum::<f64>()
            / n as f64;
        assert!((mean - e.expected_reward(&p, 8)).abs() < 0.01);
    }
}
