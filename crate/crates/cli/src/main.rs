use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use driftless::config::{ExperimentConfig, PRESETS};
use driftless::experiment::{
    cmd_grad_check, cmd_mixture_demo, cmd_report, cmd_run, describe_run, MIXTURE_COMPARISON_FILE,
};

/// Simulated asynchronous RL pipeline with adaptive domain sampling,
/// difficulty-aware length penalties and GSPO.
#[derive(Debug, Parser)]
#[command(name = "driftless", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Source {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name (default: paper-launch).
    #[arg(long)]
    preset: Option<String>,
    /// Seed; overrides DRIFTLESS_SEED, which overrides the config.
    #[arg(long, env = "DRIFTLESS_SEED")]
    seed: Option<u64>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name).with_context(|| {
                let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
                format!("known presets: {}", names.join(", "))
            })?,
            (None, None) => ExperimentConfig::preset("paper-launch")?,
        };
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train for the configured number of steps and write metrics.
    Run {
        #[command(flatten)]
        source: Source,
        /// Output directory (default: the config's run.out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare adaptive and static domain sampling on the same seeds.
    MixtureDemo {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check analytic gradients against central finite differences.
    GradCheck {
        #[command(flatten)]
        source: Source,
        /// Perturb the analytic gradient at this parameter index.
        #[arg(long, hide = true)]
        corrupt_index: Option<usize>,
    },
    /// Turn one run directory, or a directory of runs, into plot tables.
    Report {
        run_dir: PathBuf,
        /// Where to write the tables (default: RUN_DIR).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn out_dir(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.unwrap_or_else(|| PathBuf::from(&cfg.run.out_dir))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { source, out } => {
            let cfg = source.load()?;
            let seed = source.seed.unwrap_or(cfg.run.seed);
            let out = out_dir(out, &cfg);
            let summary = cmd_run(&cfg, seed, &out)?;
            describe_run(&mut std::io::stdout(), &summary)?;
            println!("wrote {}", out.display());
        }
        Command::MixtureDemo { source, out } => {
            let cfg = source.load()?;
            let seeds = match source.seed {
                Some(s) => vec![s],
                None => cfg.seed_list(),
            };
            let out = out_dir(out, &cfg);
            let cmp = cmd_mixture_demo(&cfg, &seeds, &out)?;
            println!("after {} completions:", cmp.horizon);
            for (seed, adaptive, fixed) in cmp.per_seed() {
                println!("  seed {seed}: adaptive max drift {adaptive:.4}, static max drift {fixed:.4}");
            }
            println!("wrote {}", out.join(MIXTURE_COMPARISON_FILE).display());
        }
        Command::GradCheck {
            source,
            corrupt_index,
        } => {
            let cfg = source.load()?;
            let seed = source.seed.unwrap_or(cfg.run.seed);
            let report = cmd_grad_check(cfg.clip, seed, corrupt_index)?;
            println!(
                "checked {} coordinates over {} batches ({} redrawn near clip kinks)",
                report.coordinates, report.batches, report.redrawn
            );
            println!("max relative error {:.3e} (tolerance {:.0e})", report.max_rel_err(), report.tolerance);
            if !report.passed() {
                let w = report.worst.expect("a failing report has a worst coordinate");
                bail!(
                    "{} gradient mismatch at parameter index {} (batch {}): analytic {:.6e}, numeric {:.6e}",
                    w.kind,
                    w.param,
                    w.batch,
                    w.analytic,
                    w.numeric
                );
            }
            println!("ok");
        }
        Command::Report { run_dir, out } => {
            let out = out.unwrap_or_else(|| run_dir.clone());
            let summary = cmd_report(&run_dir, &out)?;
            println!("runs: {}", summary.runs.join(", "));
            for t in &summary.tables {
                println!("wrote {}", t.display());
            }
            if let Some(r) = summary.dap_lp_hard_length_ratio {
                println!("hard-class final length, DAP / LP: {r:.3}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

