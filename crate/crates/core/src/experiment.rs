//! The standard experiments behind the command-line tool: a single training
//! run, the adaptive-vs-static mixture comparison, the gradient check, and
//! plot-table export from finished run directories.
//!
//! A run directory holds `completions.jsonl`, `steps.jsonl`, `summary.json`
//! and the exact `config.toml` that produced it.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::env::Difficulty;
use crate::optimizer::ClipConfig;
use crate::gradcheck::{run_grad_check, GradCheckConfig, GradCheckError, GradCheckReport};
use crate::metrics::{
    mixture_at, read_records, CompletionRecord, JsonlSink, MemorySink, SchemaError, StepRecord,
    Tee, COMPLETION_KIND, STEP_KIND,
};
use crate::pipeline::{
    run_simulation, version_lag_stats, GroupCounts, LagSummary, RunOutcome, SimError,
};
use crate::sampler::SamplingMode;
use crate::shaping::PenaltyMode;

pub const COMPLETIONS_FILE: &str = "completions.jsonl";
pub const STEPS_FILE: &str = "steps.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

pub const MIXTURE_COMPARISON_FILE: &str = "mixture_comparison.csv";
pub const REWARD_TABLE: &str = "reward_by_domain.csv";
pub const LENGTH_TABLE: &str = "length_by_difficulty.csv";
pub const MIXTURE_TABLE: &str = "mixture.csv";
pub const LAG_TABLE: &str = "version_lag_hist.csv";
pub const LENGTH_RATIO_TABLE: &str = "dap_lp_length_ratio.csv";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    GradCheck(#[from] GradCheckError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Metrics {
        path: PathBuf,
        #[source]
        source: SchemaError,
    },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("run stopped early: {0}")]
    Aborted(String),
    #[error("seed {seed}: run ended after {reached} completions, before the {horizon}-completion horizon")]
    ShortRun { seed: u64, reached: u64, horizon: u64 },
    #[error("no run directories with {STEPS_FILE} under {0}")]
    NoRuns(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ExperimentError> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub penalty_mode: PenaltyMode,
    pub sampling_mode: SamplingMode,
    pub steps: u64,
    pub end_time: f64,
    pub aborted: Option<String>,
    pub groups: GroupCounts,
    pub domains: Vec<String>,
    pub completions_by_domain: Vec<u64>,
    pub final_mixture: Vec<f64>,
    pub version_lag: LagSummary,
    pub final_expected_reward_by_domain: Vec<f64>,
    pub final_expected_length_by_difficulty: BTreeMap<String, f64>,
}

/// Result of one run kept in memory alongside what was written to disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub completions: Vec<CompletionRecord>,
    pub steps: Vec<StepRecord>,
}

fn summarize(cfg: &ExperimentConfig, seed: u64, outcome: &RunOutcome, steps: &[StepRecord]) -> RunSummary {
    let total: u64 = outcome.counts.iter().sum();
    let last = steps.last();
    RunSummary {
        seed,
        penalty_mode: cfg.penalty.mode,
        sampling_mode: cfg.sampler.mode,
        steps: outcome.steps,
        end_time: outcome.end_time,
        aborted: outcome.aborted.clone(),
        groups: outcome.groups.clone(),
        domains: cfg.domain_names(),
        completions_by_domain: outcome.counts.clone(),
        final_mixture: outcome
            .counts
            .iter()
            .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
            .collect(),
        version_lag: version_lag_stats(steps),
        final_expected_reward_by_domain: last
            .map(|s| s.expected_reward_by_domain.clone())
            .unwrap_or_default(),
        final_expected_length_by_difficulty: last
            .map(|s| s.expected_length_by_difficulty.clone())
            .unwrap_or_default(),
    }
}

/// Runs one seed in memory.
pub fn run_in_memory(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts, ExperimentError> {
    let pc = cfg.pipeline_config()?;
    let mut mem = MemorySink::default();
    let outcome = run_simulation(&pc, seed, &mut mem)?;
    let summary = summarize(cfg, seed, &outcome, &mem.steps);
    Ok(RunArtifacts {
        summary,
        completions: mem.completions,
        steps: mem.steps,
    })
}

/// Runs one seed and writes the run directory. Files are written even when
/// the run stops early; the early stop is then reported as an error.
pub fn cmd_run(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<RunSummary, ExperimentError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut recorded = cfg.clone();
    recorded.run.seed = seed;
    recorded.run.out_dir = out.display().to_string();
    let config_path = out.join(CONFIG_FILE);
    fs::write(&config_path, recorded.to_toml()).map_err(io_err(&config_path))?;

    let completions_path = out.join(COMPLETIONS_FILE);
    let steps_path = out.join(STEPS_FILE);
    let pc = cfg.pipeline_config()?;
    let mut jsonl = JsonlSink::new(create(&completions_path)?, create(&steps_path)?);
    let mut mem = MemorySink::default();
    let outcome = run_simulation(&pc, seed, &mut Tee(&mut jsonl, &mut mem))?;
    jsonl.flush().map_err(io_err(&steps_path))?;
    drop(jsonl);

    let summary = summarize(cfg, seed, &outcome, &mem.steps);
    let summary_path = out.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, text + "\n").map_err(io_err(&summary_path))?;
    match outcome.aborted {
        Some(reason) => Err(ExperimentError::Aborted(reason)),
        None => Ok(summary),
    }
}

/// One line of the mixture comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureRow {
    pub seed: u64,
    pub domain: String,
    pub target: f64,
    pub adaptive_share: f64,
    pub static_share: f64,
    pub adaptive_drift: f64,
    pub static_drift: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComparison {
    pub horizon: u64,
    pub rows: Vec<MixtureRow>,
}

impl MixtureComparison {
    pub fn adaptive_max_drift(&self) -> f64 {
        self.rows.iter().map(|r| r.adaptive_drift).fold(0.0, f64::max)
    }

    pub fn static_max_drift(&self) -> f64 {
        self.rows.iter().map(|r| r.static_drift).fold(0.0, f64::max)
    }

    /// Worst adaptive and static drift per seed, in seed order.
    pub fn per_seed(&self) -> Vec<(u64, f64, f64)> {
        let mut out: Vec<(u64, f64, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.seed => {
                    last.1 = last.1.max(r.adaptive_drift);
                    last.2 = last.2.max(r.static_drift);
                }
                _ => out.push((r.seed, r.adaptive_drift, r.static_drift)),
            }
        }
        out
    }
}

fn mixture_after(
    cfg: &ExperimentConfig,
    mode: SamplingMode,
    seed: u64,
    horizon: u64,
) -> Result<Vec<f64>, ExperimentError> {
    let mut pc = cfg.with_sampling_mode(mode).pipeline_config()?;
    // the comparison is about generation, so training never ends it early
    pc.max_steps = u64::MAX;
    pc.max_completions = Some(horizon);
    let mut mem = MemorySink::default();
    run_simulation(&pc, seed, &mut mem)?;
    mixture_at(&mem.completions, cfg.domains.len(), horizon).ok_or_else(|| {
        ExperimentError::ShortRun {
            seed,
            reached: mem.completions.last().map_or(0, |c| c.completions),
            horizon,
        }
    })
}

/// Adaptive and static sampling on identical seeds, measured after
/// `mixture_demo.completions` completed rollouts.
pub fn mixture_comparison(
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<MixtureComparison, ExperimentError> {
    cfg.validate()?;
    let horizon = cfg.mixture_demo.completions;
    let names = cfg.domain_names();
    let mut rows = Vec::new();
    for &seed in seeds {
        let adaptive = mixture_after(cfg, SamplingMode::Adaptive, seed, horizon)?;
        let fixed = mixture_after(cfg, SamplingMode::Static, seed, horizon)?;
        for (d, name) in names.iter().enumerate() {
            let target = cfg.sampler.weights[d];
            rows.push(MixtureRow {
                seed,
                domain: name.clone(),
                target,
                adaptive_share: adaptive[d],
                static_share: fixed[d],
                adaptive_drift: (adaptive[d] - target).abs(),
                static_drift: (fixed[d] - target).abs(),
            });
        }
    }
    Ok(MixtureComparison { horizon, rows })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let csv_err = |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_writer(create(path)?);
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn cmd_mixture_demo(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    out: &Path,
) -> Result<MixtureComparison, ExperimentError> {
    let cmp = mixture_comparison(cfg, seeds)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_csv(&out.join(MIXTURE_COMPARISON_FILE), &cmp.rows)?;
    Ok(cmp)
}

pub fn cmd_grad_check(
    clip: ClipConfig,
    seed: u64,
    corrupt: Option<usize>,
) -> Result<GradCheckReport, ExperimentError> {
    clip.validate().map_err(|e| ConfigError::Invalid {
        key: "clip".into(),
        message: e.to_string(),
    })?;
    let cfg = GradCheckConfig {
        seed,
        clip,
        corrupt,
        ..GradCheckConfig::default()
    };
    Ok(run_grad_check(&cfg)?)
}

/// Final hard/easy statistics of one run, from its last step record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LengthOutcome {
    pub easy_length: f64,
    pub hard_length: f64,
    pub hard_solve: f64,
}

fn length_outcome(cfg: &ExperimentConfig, steps: &[StepRecord]) -> Option<LengthOutcome> {
    let last = steps.last()?;
    let mut hard_solve = (0.0, 0usize);
    for env in cfg.build_envs() {
        for pc in env.prompt_classes.iter().filter(|pc| pc.difficulty == Difficulty::Hard) {
            hard_solve.0 += last.expected_solve_by_class[pc.class];
            hard_solve.1 += 1;
        }
    }
    Some(LengthOutcome {
        easy_length: *last.expected_length_by_difficulty.get(Difficulty::Easy.as_str())?,
        hard_length: *last.expected_length_by_difficulty.get(Difficulty::Hard.as_str())?,
        hard_solve: hard_solve.0 / hard_solve.1.max(1) as f64,
    })
}

/// Paired LP/DAP runs over the same seeds, summarized by per-mode medians.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyComparison {
    pub seeds: Vec<u64>,
    pub lp: Vec<LengthOutcome>,
    pub dap: Vec<LengthOutcome>,
    pub aborted: Vec<String>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl PenaltyComparison {
    fn med(runs: &[LengthOutcome], f: impl Fn(&LengthOutcome) -> f64) -> f64 {
        median(runs.iter().map(f).collect())
    }

    pub fn hard_length_ratio(&self) -> f64 {
        Self::med(&self.dap, |o| o.hard_length) / Self::med(&self.lp, |o| o.hard_length)
    }

    /// DAP minus LP median hard-class solve rate.
    pub fn hard_solve_gain(&self) -> f64 {
        Self::med(&self.dap, |o| o.hard_solve) - Self::med(&self.lp, |o| o.hard_solve)
    }

    /// Relative difference of median easy-class lengths, DAP against LP.
    pub fn easy_length_rel_diff(&self) -> f64 {
        let lp = Self::med(&self.lp, |o| o.easy_length);
        (Self::med(&self.dap, |o| o.easy_length) - lp).abs() / lp
    }
}

pub fn penalty_comparison(
    cfg: &ExperimentConfig,
    seeds: &[u64],
) -> Result<PenaltyComparison, ExperimentError> {
    let mut out = PenaltyComparison {
        seeds: seeds.to_vec(),
        lp: Vec::new(),
        dap: Vec::new(),
        aborted: Vec::new(),
    };
    for mode in [PenaltyMode::Lp, PenaltyMode::Dap] {
        let c = cfg.with_penalty_mode(mode);
        for &seed in seeds {
            let run = run_in_memory(&c, seed)?;
            if let Some(reason) = &run.summary.aborted {
                out.aborted.push(format!("{mode:?} seed {seed}: {reason}"));
            }
            let o = length_outcome(&c, &run.steps).ok_or_else(|| ExperimentError::Corrupt {
                path: PathBuf::from(format!("<{mode:?} seed {seed}>")),
                message: "no step records with easy and hard lengths".into(),
            })?;
            match mode {
                PenaltyMode::Lp => out.lp.push(o),
                PenaltyMode::Dap => out.dap.push(o),
            }
        }
    }
    Ok(out)
}

/// A run directory as read back by the report command.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub label: String,
    pub config: Option<ExperimentConfig>,
    pub completions: Vec<CompletionRecord>,
    pub steps: Vec<StepRecord>,
}

fn read_stream<T: for<'de> Deserialize<'de>>(
    path: &Path,
    kind: &'static str,
) -> Result<Vec<T>, ExperimentError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_records(BufReader::new(file), kind).map_err(|source| ExperimentError::Metrics {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_run(dir: &Path, label: String) -> Result<LoadedRun, ExperimentError> {
    let config_path = dir.join(CONFIG_FILE);
    let config = if config_path.exists() {
        Some(ExperimentConfig::load(&config_path)?)
    } else {
        None
    };
    Ok(LoadedRun {
        label,
        config,
        completions: read_stream(&dir.join(COMPLETIONS_FILE), COMPLETION_KIND)?,
        steps: read_stream(&dir.join(STEPS_FILE), STEP_KIND)?,
    })
}

/// The run in `dir` itself, or else every immediate subdirectory holding one.
pub fn find_runs(dir: &Path) -> Result<Vec<(PathBuf, String)>, ExperimentError> {
    if dir.join(STEPS_FILE).is_file() {
        let label = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "run".into());
        return Ok(vec![(dir.to_path_buf(), label)]);
    }
    let mut runs = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.join(STEPS_FILE).is_file() {
            let label = path.file_name().unwrap().to_string_lossy().into_owned();
            runs.push((path, label));
        }
    }
    runs.sort();
    if runs.is_empty() {
        return Err(ExperimentError::NoRuns(dir.to_path_buf()));
    }
    Ok(runs)
}

#[derive(Debug, Serialize)]
struct RewardRow<'a> {
    run: &'a str,
    step: u64,
    domain: &'a str,
    mean_reward: Option<f64>,
    expected_reward: f64,
}

#[derive(Debug, Serialize)]
struct LengthRow<'a> {
    run: &'a str,
    penalty_mode: &'a str,
    step: u64,
    difficulty: &'a str,
    expected_length: f64,
}

#[derive(Debug, Serialize)]
struct ShareRow<'a> {
    run: &'a str,
    completions: u64,
    domain: &'a str,
    share: f64,
}

#[derive(Debug, Serialize)]
struct LagRow<'a> {
    run: &'a str,
    lag: u64,
    groups: u64,
}

#[derive(Debug, Serialize)]
struct RatioRow {
    lp_runs: usize,
    dap_runs: usize,
    lp_hard_length: f64,
    dap_hard_length: f64,
    hard_length_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportSummary {
    pub runs: Vec<String>,
    pub tables: Vec<PathBuf>,
    /// Median final hard-class length under DAP over LP, when both modes are present.
    pub dap_lp_hard_length_ratio: Option<f64>,
}

fn mode_label(run: &LoadedRun) -> &'static str {
    match run.config.as_ref().map(|c| c.penalty.mode) {
        Some(PenaltyMode::Lp) => "lp",
        Some(PenaltyMode::Dap) => "dap",
        None => "unknown",
    }
}

fn domain_name(run: &LoadedRun, d: usize) -> String {
    run.config
        .as_ref()
        .and_then(|c| c.domains.get(d))
        .map(|d| d.name.clone())
        .unwrap_or_else(|| format!("domain{d}"))
}

/// Aggregates one or more run directories into plot tables written to `out`.
pub fn cmd_report(run_dir: &Path, out: &Path) -> Result<ReportSummary, ExperimentError> {
    let runs = find_runs(run_dir)?
        .into_iter()
        .map(|(path, label)| load_run(&path, label))
        .collect::<Result<Vec<_>, _>>()?;
    fs::create_dir_all(out).map_err(io_err(out))?;

    let mut reward = Vec::new();
    let mut length = Vec::new();
    let mut shares = Vec::new();
    let mut lags = Vec::new();
    let names: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            let n = r.steps.first().map_or(0, |s| s.expected_reward_by_domain.len());
            (0..n).map(|d| domain_name(r, d)).collect()
        })
        .collect();
    for (run, names) in runs.iter().zip(&names) {
        for s in &run.steps {
            for (d, name) in names.iter().enumerate() {
                reward.push(RewardRow {
                    run: &run.label,
                    step: s.step,
                    domain: name,
                    mean_reward: s.mean_reward_by_domain.get(d).copied().flatten(),
                    expected_reward: s.expected_reward_by_domain[d],
                });
            }
            for (difficulty, &len) in &s.expected_length_by_difficulty {
                length.push(LengthRow {
                    run: &run.label,
                    penalty_mode: mode_label(run),
                    step: s.step,
                    difficulty,
                    expected_length: len,
                });
            }
        }
        let mut counts = vec![0u64; names.len()];
        let mut prev = 0;
        for c in &run.completions {
            if c.domain >= counts.len() {
                return Err(ExperimentError::Corrupt {
                    path: run_dir.join(&run.label).join(COMPLETIONS_FILE),
                    message: format!("domain {} out of range", c.domain),
                });
            }
            counts[c.domain] += c.completions - prev;
            prev = c.completions;
            for (d, name) in names.iter().enumerate() {
                shares.push(ShareRow {
                    run: &run.label,
                    completions: c.completions,
                    domain: name,
                    share: counts[d] as f64 / c.completions as f64,
                });
            }
        }
        let mut hist: BTreeMap<u64, u64> = BTreeMap::new();
        for &l in run.steps.iter().flat_map(|s| &s.version_lags) {
            *hist.entry(l).or_default() += 1;
        }
        lags.extend(hist.into_iter().map(|(lag, groups)| LagRow {
            run: &run.label,
            lag,
            groups,
        }));
    }

    let mut tables = Vec::new();
    for (name, result) in [
        (REWARD_TABLE, write_csv(&out.join(REWARD_TABLE), &reward)),
        (LENGTH_TABLE, write_csv(&out.join(LENGTH_TABLE), &length)),
        (MIXTURE_TABLE, write_csv(&out.join(MIXTURE_TABLE), &shares)),
        (LAG_TABLE, write_csv(&out.join(LAG_TABLE), &lags)),
    ] {
        result?;
        tables.push(out.join(name));
    }

    let final_hard = |mode: &str| -> Vec<f64> {
        runs.iter()
            .filter(|r| mode_label(r) == mode)
            .filter_map(|r| r.steps.last())
            .filter_map(|s| s.expected_length_by_difficulty.get(Difficulty::Hard.as_str()).copied())
            .collect()
    };
    let (lp, dap) = (final_hard("lp"), final_hard("dap"));
    let ratio = if lp.is_empty() || dap.is_empty() {
        None
    } else {
        let (lp_runs, dap_runs) = (lp.len(), dap.len());
        let (lp_hard_length, dap_hard_length) = (median(lp), median(dap));
        let row = RatioRow {
            lp_runs,
            dap_runs,
            lp_hard_length,
            dap_hard_length,
            hard_length_ratio: dap_hard_length / lp_hard_length,
        };
        let path = out.join(LENGTH_RATIO_TABLE);
        write_csv(&path, &[&row])?;
        tables.push(path);
        Some(row.hard_length_ratio)
    };

    Ok(ReportSummary {
        runs: runs.into_iter().map(|r| r.label).collect(),
        tables,
        dap_lp_hard_length_ratio: ratio,
    })
}

/// Writes a one-line human summary of a run to `w`.
pub fn describe_run<W: Write>(w: &mut W, s: &RunSummary) -> std::io::Result<()> {
    let rewards: Vec<String> = s
        .domains
        .iter()
        .zip(&s.final_expected_reward_by_domain)
        .map(|(d, r)| format!("{d}={r:.3}"))
        .collect();
    writeln!(
        w,
        "seed {}: {} steps, {} groups ({} filtered), mean lag {:.2}, final reward {}",
        s.seed,
        s.steps,
        s.groups.generated,
        s.groups.filtered_out,
        s.version_lag.mean,
        rewards.join(" ")
    )
}
