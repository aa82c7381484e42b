//! Experiment configuration: a TOML document with one section per subsystem.
//!
//! ```toml
//! [run]
//! seed = 1
//! seeds = [1, 2, 3]
//! out_dir = "runs/default"
//!
//! [sampler]
//! mode = "adaptive"            # or "static"
//! weights = [0.40, 0.25, 0.15, 0.10, 0.10]
//! warmup_threshold = 50
//! clip_lo = 0.1
//! clip_hi = 10.0
//!
//! [penalty]
//! max_len = 64
//! buffer = 16
//! gamma = 1.0
//! lambda_f = 1.0
//! mode = "dap"                 # or "lp"
//!
//! [clip]
//! eps_low = 0.003
//! eps_high = 0.004
//!
//! [optimizer]
//! step_size = 0.05
//! advantage = "std"            # or "mean"
//!
//! [policy]
//! vocab_size = 16
//! easy_logit_bonus = 2.0
//! init_verbosity_logit = 2.0
//!
//! [pipeline]
//! actor_slots = 128
//! group_size = 8
//! groups_per_step = 8
//! broadcast_delay = 0.5
//! max_steps = 200
//!
//! [mixture_demo]
//! completions = 5000
//!
//! [[domains]]
//! name = "math"
//! reward_kind = "binary_exact_match"   # fraction_satisfied | all_tests_pass
//! service = { kind = "exponential", mean = 1.0 }
//! classes = [{ correct_token = 3, difficulty = "easy" }]
//! ```
//!
//! Class entries also accept `min_reasoning` (default 0) and
//! `init_verbosity_logit` (defaults to the `[policy]` value).

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Difficulty, EnvSpec, PromptClass, RewardKind, ServiceTime};
use crate::optimizer::{AdvantageMode, ClipConfig};
use crate::pipeline::PipelineConfig;
use crate::policy::PolicyParams;
use crate::sampler::{DomainId, DomainWeights, MixtureSampler, SamplerState, SamplingMode};
use crate::shaping::{PenaltyConfig, PenaltyMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

impl ConfigError {
    fn invalid(key: impl Into<String>, message: impl ToString) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: String,
}

fn default_out_dir() -> String {
    "runs/latest".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    #[serde(default)]
    pub mode: SamplingMode,
    pub weights: Vec<f64>,
    #[serde(default = "default_warmup")]
    pub warmup_threshold: u64,
    #[serde(default = "default_clip_lo")]
    pub clip_lo: f64,
    #[serde(default = "default_clip_hi")]
    pub clip_hi: f64,
}

fn default_warmup() -> u64 {
    crate::sampler::DEFAULT_WARMUP_THRESHOLD
}

fn default_clip_lo() -> f64 {
    crate::sampler::DEFAULT_CLIP_LO
}

fn default_clip_hi() -> f64 {
    crate::sampler::DEFAULT_CLIP_HI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub step_size: f64,
    #[serde(default)]
    pub advantage: AdvantageMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub vocab_size: usize,
    pub easy_logit_bonus: f64,
    pub init_verbosity_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    pub actor_slots: usize,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub broadcast_delay: f64,
    pub max_steps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureDemoSection {
    pub completions: u64,
}

impl Default for MixtureDemoSection {
    fn default() -> Self {
        Self { completions: 5000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSection {
    pub correct_token: u32,
    pub difficulty: Difficulty,
    #[serde(default)]
    pub min_reasoning: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_verbosity_logit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSection {
    pub name: String,
    pub reward_kind: RewardKind,
    pub service: ServiceTime,
    pub classes: Vec<ClassSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub sampler: SamplerSection,
    pub penalty: PenaltyConfig,
    pub clip: ClipConfig,
    pub optimizer: OptimizerSection,
    pub policy: PolicySection,
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub mixture_demo: MixtureDemoSection,
    pub domains: Vec<DomainSection>,
}

/// Built-in presets, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("paper-launch", include_str!("../presets/paper-launch.toml")),
    ("homogeneous", include_str!("../presets/homogeneous.toml")),
    ("single-domain", include_str!("../presets/single-domain.toml")),
    ("two-domain", include_str!("../presets/two-domain.toml")),
    ("length-dap", include_str!("../presets/length-dap.toml")),
    ("length-lp", include_str!("../presets/length-lp.toml")),
    ("dap-gamma-half", include_str!("../presets/dap-gamma-half.toml")),
    ("uniform-mixture", include_str!("../presets/uniform-mixture.toml")),
    ("synchronous", include_str!("../presets/synchronous.toml")),
];

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let (_, text) = PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    /// Seeds to use for multi-seed commands; falls back to `run.seed`.
    pub fn seed_list(&self) -> Vec<u64> {
        if self.run.seeds.is_empty() {
            vec![self.run.seed]
        } else {
            self.run.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        DomainWeights::new(self.sampler.weights.clone())
            .map_err(|e| ConfigError::invalid("sampler.weights", e))?;
        if self.sampler.weights.len() != self.domains.len() {
            return Err(ConfigError::invalid(
                "sampler.weights",
                format!(
                    "{} weights for {} domains",
                    self.sampler.weights.len(),
                    self.domains.len()
                ),
            ));
        }
        SamplerState::new(
            self.domains.len(),
            self.sampler.warmup_threshold,
            self.sampler.clip_lo,
            self.sampler.clip_hi,
        )
        .map_err(|e| ConfigError::invalid("sampler.clip_lo", e))?;
        self.penalty.validate().map_err(|e| {
            let key = match e {
                crate::shaping::ShapingError::Gamma(_) => "penalty.gamma",
                crate::shaping::ShapingError::LambdaF(_) => "penalty.lambda_f",
                _ => "penalty.buffer",
            };
            ConfigError::invalid(key, e)
        })?;
        if self.penalty.max_len < 2 {
            return Err(ConfigError::invalid("penalty.max_len", "must be >= 2"));
        }
        self.clip
            .validate()
            .map_err(|e| ConfigError::invalid("clip", e))?;
        if !(self.optimizer.step_size.is_finite() && self.optimizer.step_size >= 0.0) {
            return Err(ConfigError::invalid("optimizer.step_size", "must be finite and >= 0"));
        }
        if self.policy.vocab_size == 0 {
            return Err(ConfigError::invalid("policy.vocab_size", "must be >= 1"));
        }
        if !self.policy.easy_logit_bonus.is_finite() {
            return Err(ConfigError::invalid("policy.easy_logit_bonus", "must be finite"));
        }
        if !self.policy.init_verbosity_logit.is_finite() {
            return Err(ConfigError::invalid("policy.init_verbosity_logit", "must be finite"));
        }
        let p = &self.pipeline;
        if p.actor_slots == 0 {
            return Err(ConfigError::invalid("pipeline.actor_slots", "must be >= 1"));
        }
        if p.group_size < 2 {
            return Err(ConfigError::invalid("pipeline.group_size", "must be >= 2"));
        }
        if p.groups_per_step == 0 {
            return Err(ConfigError::invalid("pipeline.groups_per_step", "must be >= 1"));
        }
        if !(p.broadcast_delay.is_finite() && p.broadcast_delay >= 0.0) {
            return Err(ConfigError::invalid("pipeline.broadcast_delay", "must be finite and >= 0"));
        }
        for (i, env) in self.build_envs().iter().enumerate() {
            env.validate(self.policy.vocab_size)
                .map_err(|e| ConfigError::invalid(format!("domains[{i}]"), e))?;
        }
        for (i, d) in self.domains.iter().enumerate() {
            for (j, c) in d.classes.iter().enumerate() {
                if let Some(v) = c.init_verbosity_logit {
                    if !v.is_finite() {
                        return Err(ConfigError::invalid(
                            format!("domains[{i}].classes[{j}].init_verbosity_logit"),
                            "must be finite",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Environments with globally numbered prompt classes, in config order.
    pub fn build_envs(&self) -> Vec<EnvSpec> {
        let mut next_class = 0;
        self.domains
            .iter()
            .enumerate()
            .map(|(i, d)| EnvSpec {
                domain: DomainId(i),
                name: d.name.clone(),
                reward_kind: d.reward_kind,
                service_time: d.service,
                prompt_classes: d
                    .classes
                    .iter()
                    .map(|c| {
                        let class = next_class;
                        next_class += 1;
                        PromptClass {
                            class,
                            correct_token: c.correct_token,
                            difficulty: c.difficulty,
                            min_reasoning: c.min_reasoning,
                        }
                    })
                    .collect(),
            })
            .collect()
    }

    /// Version-0 policy: flat answer logits for hard classes, a bonus on the
    /// correct token for easy ones.
    pub fn initial_params(&self) -> PolicyParams {
        let vocab = self.policy.vocab_size;
        let classes = self
            .domains
            .iter()
            .flat_map(|d| d.classes.iter())
            .map(|c| {
                let mut logits = vec![0.0; vocab];
                if c.difficulty == Difficulty::Easy {
                    logits[c.correct_token as usize] += self.policy.easy_logit_bonus;
                }
                (
                    logits,
                    c.init_verbosity_logit
                        .unwrap_or(self.policy.init_verbosity_logit),
                )
            })
            .collect();
        PolicyParams::new(vocab, classes).expect("validated policy section")
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig, ConfigError> {
        let weights = DomainWeights::new(self.sampler.weights.clone())
            .map_err(|e| ConfigError::invalid("sampler.weights", e))?;
        let state = SamplerState::new(
            self.domains.len(),
            self.sampler.warmup_threshold,
            self.sampler.clip_lo,
            self.sampler.clip_hi,
        )
        .map_err(|e| ConfigError::invalid("sampler.clip_lo", e))?;
        let sampler = MixtureSampler::new(weights, state, self.sampler.mode)
            .map_err(|e| ConfigError::invalid("sampler.weights", e))?;
        Ok(PipelineConfig {
            actor_slots: self.pipeline.actor_slots,
            group_size: self.pipeline.group_size,
            groups_per_step: self.pipeline.groups_per_step,
            broadcast_delay: self.pipeline.broadcast_delay,
            max_steps: self.pipeline.max_steps,
            max_completions: None,
            step_size: self.optimizer.step_size,
            advantage_mode: self.optimizer.advantage,
            clip: self.clip,
            penalty: self.penalty,
            envs: self.build_envs(),
            sampler,
            initial_params: self.initial_params(),
        })
    }

    /// Copy with a different penalty mode; used for paired LP/DAP runs.
    pub fn with_penalty_mode(&self, mode: PenaltyMode) -> Self {
        let mut c = self.clone();
        c.penalty.mode = mode;
        c
    }

    pub fn with_sampling_mode(&self, mode: SamplingMode) -> Self {
        let mut c = self.clone();
        c.sampler.mode = mode;
        c
    }
}
