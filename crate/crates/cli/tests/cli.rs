use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use driftless::config::ExperimentConfig;

fn driftless(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftless"))
        .args(args)
        .env_remove("DRIFTLESS_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, edit: impl FnOnce(&mut ExperimentConfig)) -> String {
    let mut cfg = ExperimentConfig::preset("paper-launch").unwrap();
    cfg.pipeline.max_steps = 15;
    edit(&mut cfg);
    let path = dir.join(name);
    fs::write(&path, cfg.to_toml()).unwrap();
    path.display().to_string()
}

fn summary_seed(dir: &Path) -> u64 {
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    v["seed"].as_u64().unwrap()
}

#[test]
fn run_twice_gives_identical_files() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.toml", |_| {});
    for out in ["a", "b"] {
        let dir = tmp.path().join(out);
        let o = driftless(&["run", "--config", &config, "--seed", "3", "--out", dir.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["completions.jsonl", "steps.jsonl", "summary.json"] {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f} differs");
    }
    // the recorded config reloads and names the seed used
    let recorded = ExperimentConfig::load(&tmp.path().join("a").join("config.toml")).unwrap();
    assert_eq!(recorded.run.seed, 3);
}

#[test]
fn weights_not_summing_to_one_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "bad.toml", |c| {
        c.sampler.weights = vec![0.40, 0.25, 0.15, 0.05, 0.05];
    });
    let out = tmp.path().join("out");
    let o = driftless(&["run", "--config", &config, "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("weights"), "{}", stderr(&o));
    assert!(!out.join("steps.jsonl").exists());
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), "c.toml", |c| {
        c.run.seed = 4;
        c.pipeline.max_steps = 2;
    });
    let run = |dir: &str, flag: Option<&str>, env: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_driftless"));
        cmd.args(["run", "--config", &config, "--out", out.to_str().unwrap()]);
        cmd.env_remove("DRIFTLESS_SEED");
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        if let Some(e) = env {
            cmd.env("DRIFTLESS_SEED", e);
        }
        let o = cmd.output().unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        summary_seed(&out)
    };
    assert_eq!(run("config", None, None), 4);
    assert_eq!(run("env", None, Some("5")), 5);
    assert_eq!(run("flag", Some("6"), Some("5")), 6);
}

#[test]
fn report_writes_tables_and_the_length_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let runs = tmp.path().join("runs");
    for preset in ["length-lp", "length-dap"] {
        let out = runs.join(preset);
        let o = driftless(&["run", "--preset", preset, "--seed", "1", "--out", out.to_str().unwrap()]);
        // a stalled run still leaves its metrics behind
        assert!(out.join("steps.jsonl").exists(), "{}", stderr(&o));
    }
    let single = driftless(&["report", runs.join("length-lp").to_str().unwrap()]);
    assert!(single.status.success(), "{}", stderr(&single));
    for t in ["reward_by_domain.csv", "length_by_difficulty.csv", "mixture.csv", "version_lag_hist.csv"] {
        assert!(runs.join("length-lp").join(t).exists(), "{t}");
    }

    let tables = tmp.path().join("tables");
    let o = driftless(&["report", runs.to_str().unwrap(), "--out", tables.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("DAP / LP"), "{stdout}");
    let ratio = fs::read_to_string(tables.join("dap_lp_length_ratio.csv")).unwrap();
    let value: f64 = ratio.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert!(value.is_finite() && value > 0.0);
    let lengths = fs::read_to_string(tables.join("length_by_difficulty.csv")).unwrap();
    assert!(lengths.contains(",lp,") && lengths.contains(",dap,"));
}

#[test]
fn report_on_empty_or_corrupt_dirs_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = driftless(&["report", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());

    let run = tmp.path().join("broken");
    fs::create_dir(&run).unwrap();
    fs::write(run.join("steps.jsonl"), "{\"record\":\"step\"}\n").unwrap();
    fs::write(run.join("completions.jsonl"), "").unwrap();
    let o = driftless(&["report", run.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("steps.jsonl"), "{}", stderr(&o));
}

#[test]
fn grad_check_passes_and_catches_a_corrupted_gradient() {
    let o = driftless(&["grad-check"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));

    let o = driftless(&["grad-check", "--corrupt-index", "2"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("parameter index 2"), "{}", stderr(&o));
}

#[test]
fn mixture_demo_writes_the_comparison_table() {
    let tmp = tempfile::tempdir().unwrap();
    let o = driftless(&["mixture-demo", "--preset", "two-domain", "--seed", "1", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(tmp.path().join("mixture_comparison.csv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(
        lines.next().unwrap(),
        "seed,domain,target,adaptive_share,static_share,adaptive_drift,static_drift"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn unknown_preset_lists_the_known_ones() {
    let o = driftless(&["run", "--preset", "nope"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("paper-launch"), "{}", stderr(&o));
}
