//! Discrete-event simulation of an asynchronous actor/trainer loop.
//!
//! Actor slots each work on one group at a time. A free slot draws a domain
//! from the mixture sampler, draws a prompt class uniformly from that domain,
//! samples `group_size` rollouts under the actors' current parameter snapshot
//! and finishes after the domain's service delay. Finished groups are
//! verified, shaped and scored; groups with non-constant rewards queue for the
//! trainer, which takes a gradient ascent step every `groups_per_step` groups
//! and broadcasts the new parameters after `broadcast_delay`. Actors keep
//! generating while updates are in flight, so consumed groups may lag the
//! trainer's version.
//!
//! Events at equal times run in the order completion, trainer step, broadcast,
//! slot restart, then by insertion sequence.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::io;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Difficulty, EnvError, EnvSpec};
use crate::metrics::{CompletionRecord, MetricsSink, StepRecord, COMPLETION_KIND, STEP_KIND};
use crate::optimizer::{
    batch_objective, group_advantages, objective_gradient, AdvantageMode, ClipConfig, GroupBatch,
    OptimizerError, RewardGroup, TrainingGroup,
};
use crate::policy::{apply_update, generate, PolicyError, PolicyParams, ToyRollout};
use crate::sampler::{sample_prompt, DomainId, MixtureSampler, SamplerError};
use crate::shaping::{shape_group, PenaltyConfig, RolloutOutcome, ShapingError};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("pipeline: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Shaping(#[from] ShapingError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("metrics sink failed: {0}")]
    Sink(#[from] io::Error),
}

/// Everything a run needs, already validated into domain types.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub actor_slots: usize,
    pub group_size: usize,
    pub groups_per_step: usize,
    pub broadcast_delay: f64,
    pub max_steps: u64,
    /// Optional extra halt once this many rollouts have completed.
    pub max_completions: Option<u64>,
    pub step_size: f64,
    pub advantage_mode: AdvantageMode,
    pub clip: ClipConfig,
    pub penalty: PenaltyConfig,
    pub envs: Vec<EnvSpec>,
    pub sampler: MixtureSampler,
    pub initial_params: PolicyParams,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.actor_slots == 0 {
            return Err(SimError::Config("actor_slots must be >= 1".into()));
        }
        if self.group_size < 2 {
            return Err(SimError::Config("group_size must be >= 2".into()));
        }
        if self.groups_per_step == 0 {
            return Err(SimError::Config("groups_per_step must be >= 1".into()));
        }
        if !(self.broadcast_delay.is_finite() && self.broadcast_delay >= 0.0) {
            return Err(SimError::Config("broadcast_delay must be finite and >= 0".into()));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return Err(SimError::Config("step_size must be finite and >= 0".into()));
        }
        self.clip.validate()?;
        self.penalty.validate()?;
        if self.penalty.max_len < 2 {
            return Err(PolicyError::MaxLen(self.penalty.max_len).into());
        }
        if self.envs.len() != self.sampler.weights().len() {
            return Err(SimError::Config(format!(
                "{} domains but {} weights",
                self.envs.len(),
                self.sampler.weights().len()
            )));
        }
        for (i, env) in self.envs.iter().enumerate() {
            if env.domain != DomainId(i) {
                return Err(SimError::Config(format!(
                    "domain {} listed at position {i}",
                    env.domain
                )));
            }
            env.validate(self.initial_params.vocab_size())?;
            for pc in &env.prompt_classes {
                if pc.class >= self.initial_params.num_classes() {
                    return Err(SimError::Config(format!(
                        "class {} of domain {} has no policy parameters",
                        pc.class, env.name
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    GroupCompleted = 0,
    TrainerStep = 1,
    VersionBroadcast = 2,
    SlotReady = 3,
}

#[derive(Debug)]
enum Payload {
    GroupCompleted(Box<InFlightGroup>),
    TrainerStep,
    VersionBroadcast(Arc<PolicyParams>),
    SlotReady(usize),
}

impl Payload {
    fn kind(&self) -> EventKind {
        match self {
            Payload::GroupCompleted(_) => EventKind::GroupCompleted,
            Payload::TrainerStep => EventKind::TrainerStep,
            Payload::VersionBroadcast(_) => EventKind::VersionBroadcast,
            Payload::SlotReady(_) => EventKind::SlotReady,
        }
    }
}

/// A scheduled event. Ordered so that `BinaryHeap` pops the earliest first.
#[derive(Debug)]
struct SimEvent {
    time: f64,
    kind: EventKind,
    seq: u64,
    payload: Payload,
}

impl SimEvent {
    fn key(&self) -> (f64, EventKind, u64) {
        (self.time, self.kind, self.seq)
    }
}

impl PartialEq for SimEvent {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for SimEvent {}

impl PartialOrd for SimEvent {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SimEvent {
    fn cmp(&self, other: &Self) -> Ordering {
        let (t1, k1, s1) = self.key();
        let (t2, k2, s2) = other.key();
        // reversed: the heap is a max-heap
        t2.total_cmp(&t1).then(k2.cmp(&k1)).then(s2.cmp(&s1))
    }
}

#[derive(Debug)]
struct InFlightGroup {
    index: u64,
    slot: usize,
    domain: DomainId,
    class: usize,
    rollouts: Vec<ToyRollout>,
}

#[derive(Debug)]
struct PendingGroup {
    group: TrainingGroup,
    completed_at: f64,
}

/// Group accounting at halt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub generated: u64,
    pub filtered_out: u64,
    pub consumed: u64,
    /// Retained and waiting for a trainer step.
    pub pending: u64,
    /// Still being generated or verified.
    pub in_flight: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub final_params: PolicyParams,
    pub steps: u64,
    pub end_time: f64,
    pub groups: GroupCounts,
    pub counts: Vec<u64>,
    /// Set when a non-finite update or a stall stopped the run early.
    pub aborted: Option<String>,
}

/// Consecutive filtered groups after which a run is declared stalled: once
/// every group has constant rewards the trainer can never step again.
pub const STALL_GROUPS: u64 = 20_000;

const SAMPLER_STREAM: u64 = 0;
const POLICY_STREAM: u64 = 1;
const SERVICE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct Simulation<'a, S: MetricsSink> {
    cfg: &'a PipelineConfig,
    sink: &'a mut S,
    queue: BinaryHeap<SimEvent>,
    seq: u64,
    now: f64,
    sampler: MixtureSampler,
    sampler_rng: ChaCha8Rng,
    policy_rng: ChaCha8Rng,
    service_rng: ChaCha8Rng,
    actor_params: Arc<PolicyParams>,
    trainer_params: Arc<PolicyParams>,
    buffer: Vec<PendingGroup>,
    step_scheduled: bool,
    steps: u64,
    groups: GroupCounts,
    filtered_since_step: u64,
    window_rewards: Vec<(f64, u64)>,
    completed_rollouts: u64,
    aborted: Option<String>,
}

impl<'a, S: MetricsSink> Simulation<'a, S> {
    fn schedule(&mut self, time: f64, payload: Payload) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(SimEvent {
            time,
            kind: payload.kind(),
            seq,
            payload,
        });
    }

    fn start_group(&mut self, slot: usize) -> Result<(), SimError> {
        let domain = self.sampler.sample(&mut self.sampler_rng);
        let env = &self.cfg.envs[domain.index()];
        let pick = sample_prompt(env.prompt_classes.len(), &mut self.sampler_rng)?;
        let class = env.prompt_classes[pick].class;
        let rollouts = (0..self.cfg.group_size)
            .map(|_| generate(&self.actor_params, class, self.cfg.penalty.max_len, &mut self.policy_rng))
            .collect::<Result<Vec<_>, _>>()?;
        let delay = env.service_delay(&mut self.service_rng);
        let index = self.groups.generated;
        self.groups.generated += 1;
        self.groups.in_flight += 1;
        self.schedule(
            self.now + delay,
            Payload::GroupCompleted(Box::new(InFlightGroup {
                index,
                slot,
                domain,
                class,
                rollouts,
            })),
        );
        Ok(())
    }

    fn complete_group(&mut self, group: InFlightGroup) -> Result<(), SimError> {
        self.groups.in_flight -= 1;
        let env = &self.cfg.envs[group.domain.index()];
        let max_len = self.cfg.penalty.max_len;
        let mut outcomes = Vec::with_capacity(group.rollouts.len());
        for r in &group.rollouts {
            let v = env.verify(r)?;
            outcomes.push(RolloutOutcome::new(r.length, r.finished, v.raw_reward, v.correct, max_len)?);
        }
        let (stats, shaped) = shape_group(&outcomes, &self.cfg.penalty)?;
        let g = self.cfg.group_size as u64;
        self.sampler.record_completion(group.domain, g)?;
        self.completed_rollouts += g;

        let n = outcomes.len() as f64;
        let mean_raw = outcomes.iter().map(|o| o.raw_reward).sum::<f64>() / n;
        let mean_length = outcomes.iter().map(|o| o.length as f64).sum::<f64>() / n;
        let window = &mut self.window_rewards[group.domain.index()];
        window.0 += mean_raw;
        window.1 += 1;

        let difficulty = env
            .class(group.class)
            .map(|pc| pc.difficulty)
            .unwrap_or(Difficulty::Easy);
        let training = TrainingGroup {
            advantages: group_advantages(&shaped, self.cfg.advantage_mode)?,
            shaped_rewards: shaped,
            behavior_version: group.rollouts[0].behavior_version,
            rollouts: group.rollouts,
        };
        let retained = training.has_signal();
        self.sink.completion(&CompletionRecord {
            record: COMPLETION_KIND.to_string(),
            time: self.now,
            group_index: group.index,
            domain: group.domain.index(),
            prompt_class: group.class,
            difficulty: difficulty.as_str().to_string(),
            solve_rate: stats.solve_rate,
            mean_length,
            mean_raw_reward: mean_raw,
            behavior_version: training.behavior_version,
            retained,
            completions: self.completed_rollouts,
        })?;

        if retained {
            self.buffer.push(PendingGroup {
                group: training,
                completed_at: self.now,
            });
            self.groups.pending += 1;
        } else {
            self.groups.filtered_out += 1;
            self.filtered_since_step += 1;
            if self.filtered_since_step >= STALL_GROUPS {
                self.aborted = Some(format!(
                    "stalled after step {}: {} consecutive groups had constant rewards",
                    self.steps, self.filtered_since_step
                ));
            }
        }
        self.schedule(self.now, Payload::SlotReady(group.slot));
        self.maybe_schedule_step();
        Ok(())
    }

    fn maybe_schedule_step(&mut self) {
        if !self.step_scheduled && self.buffer.len() >= self.cfg.groups_per_step {
            self.step_scheduled = true;
            self.schedule(self.now, Payload::TrainerStep);
        }
    }

    fn trainer_step(&mut self) -> Result<(), SimError> {
        self.step_scheduled = false;
        let taken: Vec<PendingGroup> = self.buffer.drain(..self.cfg.groups_per_step).collect();
        self.groups.pending -= taken.len() as u64;
        self.groups.consumed += taken.len() as u64;
        let params = Arc::clone(&self.trainer_params);
        let trainer_version = params.version();

        let groups: Vec<TrainingGroup> = taken.iter().map(|p| p.group.clone()).collect();
        let batches = groups
            .iter()
            .map(|g| g.to_batch(&params))
            .collect::<Result<Vec<GroupBatch>, _>>()?;
        let objective = batch_objective(&batches, &self.cfg.clip);
        let gradient = objective_gradient(&params, &groups, &self.cfg.clip)?;

        let lags: Vec<u64> = groups
            .iter()
            .map(|g| trainer_version - g.behavior_version)
            .collect();
        let (ratio_min, ratio_max) = batches
            .iter()
            .flat_map(|b| b.ratios.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| (lo.min(r), hi.max(r)));

        let updated = match apply_update(&params, &gradient, self.cfg.step_size) {
            Ok(p) => Arc::new(p),
            Err(e) => {
                self.aborted = Some(format!("step {}: {e}", self.steps + 1));
                return Ok(());
            }
        };
        self.steps += 1;
        self.trainer_params = Arc::clone(&updated);

        let record = self.step_record(
            objective,
            &lags,
            ratio_min,
            ratio_max,
            taken.iter().map(|p| p.completed_at).fold(f64::NEG_INFINITY, f64::max),
        );
        self.sink.step(&record)?;
        self.filtered_since_step = 0;
        for w in &mut self.window_rewards {
            *w = (0.0, 0);
        }

        self.schedule(
            self.now + self.cfg.broadcast_delay,
            Payload::VersionBroadcast(updated),
        );
        self.maybe_schedule_step();
        Ok(())
    }

    fn step_record(
        &self,
        objective: f64,
        lags: &[u64],
        ratio_min: f64,
        ratio_max: f64,
        latest_completion: f64,
    ) -> StepRecord {
        let params = &self.trainer_params;
        let snapshot = policy_snapshot(&self.cfg.envs, params, self.cfg.penalty.max_len);
        StepRecord {
            record: STEP_KIND.to_string(),
            step: self.steps,
            time: self.now,
            objective,
            trainer_version: params.version(),
            mean_reward_by_domain: self
                .window_rewards
                .iter()
                .map(|&(sum, n)| (n > 0).then(|| sum / n as f64))
                .collect(),
            expected_reward_by_domain: snapshot.reward_by_domain,
            expected_length_by_class: snapshot.length_by_class,
            expected_solve_by_class: snapshot.solve_by_class,
            expected_length_by_difficulty: snapshot.length_by_difficulty,
            mixture: self.sampler.state().shares(),
            completions: self.completed_rollouts,
            consumed_groups: lags.len() as u64,
            filtered_groups: self.filtered_since_step,
            mean_version_lag: lags.iter().sum::<u64>() as f64 / lags.len() as f64,
            max_version_lag: lags.iter().copied().max().unwrap_or(0),
            version_lags: lags.to_vec(),
            ratio_min,
            ratio_max,
            latest_consumed_completion: latest_completion,
        }
    }

    fn broadcast(&mut self, params: Arc<PolicyParams>) {
        if params.version() > self.actor_params.version() {
            self.actor_params = params;
        }
    }

    fn run(mut self) -> Result<RunOutcome, SimError> {
        for slot in 0..self.cfg.actor_slots {
            self.schedule(0.0, Payload::SlotReady(slot));
        }
        while self.steps < self.cfg.max_steps
            && self.aborted.is_none()
            && self
                .cfg
                .max_completions
                .map_or(true, |cap| self.completed_rollouts < cap)
        {
            let Some(event) = self.queue.pop() else {
                break;
            };
            debug_assert!(event.time >= self.now);
            self.now = event.time;
            match event.payload {
                Payload::SlotReady(slot) => self.start_group(slot)?,
                Payload::GroupCompleted(group) => self.complete_group(*group)?,
                Payload::TrainerStep => self.trainer_step()?,
                Payload::VersionBroadcast(params) => self.broadcast(params),
            }
        }
        Ok(RunOutcome {
            final_params: (*self.trainer_params).clone(),
            steps: self.steps,
            end_time: self.now,
            groups: self.groups,
            counts: self.sampler.state().counts().to_vec(),
            aborted: self.aborted,
        })
    }
}

/// Exact per-class and per-domain expectations under one parameter snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySnapshot {
    pub reward_by_domain: Vec<f64>,
    pub length_by_class: Vec<f64>,
    pub solve_by_class: Vec<f64>,
    pub length_by_difficulty: BTreeMap<String, f64>,
}

pub fn policy_snapshot(envs: &[EnvSpec], params: &PolicyParams, max_len: u32) -> PolicySnapshot {
    let classes = params.num_classes();
    let mut length_by_class = vec![0.0; classes];
    let mut solve_by_class = vec![0.0; classes];
    let mut by_difficulty: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for env in envs {
        for pc in &env.prompt_classes {
            let len = params.expected_length(pc.class, max_len);
            length_by_class[pc.class] = len;
            solve_by_class[pc.class] = env.expected_outcome(pc, params, max_len).1;
            let e = by_difficulty
                .entry(pc.difficulty.as_str().to_string())
                .or_default();
            e.0 += len;
            e.1 += 1;
        }
    }
    PolicySnapshot {
        reward_by_domain: envs.iter().map(|e| e.expected_reward(params, max_len)).collect(),
        length_by_class,
        solve_by_class,
        length_by_difficulty: by_difficulty
            .into_iter()
            .map(|(k, (sum, n))| (k, sum / n as f64))
            .collect(),
    }
}

/// Runs the pipeline with the configured sampling mode until `max_steps`
/// trainer steps have been taken (or the event queue drains).
pub fn run_simulation<S: MetricsSink>(
    cfg: &PipelineConfig,
    seed: u64,
    sink: &mut S,
) -> Result<RunOutcome, SimError> {
    cfg.validate()?;
    let params = Arc::new(cfg.initial_params.clone());
    let sim = Simulation {
        cfg,
        sink,
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0.0,
        sampler: cfg.sampler.clone(),
        sampler_rng: stream(seed, SAMPLER_STREAM),
        policy_rng: stream(seed, POLICY_STREAM),
        service_rng: stream(seed, SERVICE_STREAM),
        actor_params: Arc::clone(&params),
        trainer_params: params,
        buffer: Vec::new(),
        step_scheduled: false,
        steps: 0,
        groups: GroupCounts::default(),
        filtered_since_step: 0,
        window_rewards: vec![(0.0, 0); cfg.envs.len()],
        completed_rollouts: 0,
        aborted: None,
    };
    sim.run()
}

/// The uncorrected baseline: domains are always drawn with the configured weights.
pub fn run_static_baseline<S: MetricsSink>(
    cfg: &PipelineConfig,
    seed: u64,
    sink: &mut S,
) -> Result<RunOutcome, SimError> {
    let mut static_cfg = cfg.clone();
    static_cfg.sampler = MixtureSampler::new(
        cfg.sampler.weights().clone(),
        cfg.sampler.state().clone(),
        crate::sampler::SamplingMode::Static,
    )?;
    run_simulation(&static_cfg, seed, sink)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LagSummary {
    pub mean: f64,
    pub max: u64,
    pub groups: u64,
}

/// Version lag (trainer version at consumption minus behavior version) over all consumed groups.
pub fn version_lag_stats(steps: &[StepRecord]) -> LagSummary {
    let lags = steps.iter().flat_map(|s| s.version_lags.iter().copied());
    let (sum, max, n) = lags.fold((0u64, 0u64, 0u64), |(s, m, n), l| (s + l, m.max(l), n + 1));
    LagSummary {
        mean: if n == 0 { 0.0 } else { sum as f64 / n as f64 },
        max,
        groups: n,
    }
}
