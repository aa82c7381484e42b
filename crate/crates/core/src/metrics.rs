//! Metric records emitted by the pipeline and their line-delimited encoding.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

/// One finished group (generation plus verification).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompletionRecord {
    pub record: String,
    pub time: f64,
    pub group_index: u64,
    pub domain: usize,
    pub prompt_class: usize,
    pub difficulty: String,
    pub solve_rate: f64,
    pub mean_length: f64,
    pub mean_raw_reward: f64,
    pub behavior_version: u64,
    pub retained: bool,
    /// Cumulative completed rollouts, this group included.
    pub completions: u64,
}

/// One trainer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub record: String,
    pub step: u64,
    pub time: f64,
    pub objective: f64,
    pub trainer_version: u64,
    /// Mean raw reward of groups completed since the previous step; null if none.
    pub mean_reward_by_domain: Vec<Option<f64>>,
    /// Exact expected raw reward per domain under the post-step parameters.
    pub expected_reward_by_domain: Vec<f64>,
    pub expected_length_by_class: Vec<f64>,
    pub expected_solve_by_class: Vec<f64>,
    pub expected_length_by_difficulty: BTreeMap<String, f64>,
    /// Completed-rollout share per domain so far.
    pub mixture: Vec<f64>,
    pub completions: u64,
    pub consumed_groups: u64,
    pub filtered_groups: u64,
    pub mean_version_lag: f64,
    pub max_version_lag: u64,
    pub version_lags: Vec<u64>,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub latest_consumed_completion: f64,
}

pub const COMPLETION_KIND: &str = "completion";
pub const STEP_KIND: &str = "step";

pub const COMPLETION_KEYS: &[&str] = &[
    "record",
    "time",
    "group_index",
    "domain",
    "prompt_class",
    "difficulty",
    "solve_rate",
    "mean_length",
    "mean_raw_reward",
    "behavior_version",
    "retained",
    "completions",
];

pub const STEP_KEYS: &[&str] = &[
    "record",
    "step",
    "time",
    "objective",
    "trainer_version",
    "mean_reward_by_domain",
    "expected_reward_by_domain",
    "expected_length_by_class",
    "expected_solve_by_class",
    "expected_length_by_difficulty",
    "mixture",
    "completions",
    "consumed_groups",
    "filtered_groups",
    "mean_version_lag",
    "max_version_lag",
    "version_lags",
    "ratio_min",
    "ratio_max",
    "latest_consumed_completion",
];

/// Receives records as the simulation produces them.
pub trait MetricsSink {
    fn completion(&mut self, record: &CompletionRecord) -> io::Result<()>;
    fn step(&mut self, record: &StepRecord) -> io::Result<()>;
}

#[derive(Debug, Default, Clone)]
pub struct MemorySink {
    pub completions: Vec<CompletionRecord>,
    pub steps: Vec<StepRecord>,
}

impl MetricsSink for MemorySink {
    fn completion(&mut self, record: &CompletionRecord) -> io::Result<()> {
        self.completions.push(record.clone());
        Ok(())
    }

    fn step(&mut self, record: &StepRecord) -> io::Result<()> {
        self.steps.push(record.clone());
        Ok(())
    }
}

/// Writes completions and steps to two line-delimited JSON streams.
pub struct JsonlSink<W: Write> {
    completions: W,
    steps: W,
}

impl<W: Write> JsonlSink<W> {
    pub fn new(completions: W, steps: W) -> Self {
        Self { completions, steps }
    }

    pub fn flush(&mut self) -> io::Result<()> {
        self.completions.flush()?;
        self.steps.flush()
    }
}

fn write_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> io::Result<()> {
    serde_json::to_writer(&mut *w, value)?;
    w.write_all(b"\n")
}

impl<W: Write> MetricsSink for JsonlSink<W> {
    fn completion(&mut self, record: &CompletionRecord) -> io::Result<()> {
        write_line(&mut self.completions, record)
    }

    fn step(&mut self, record: &StepRecord) -> io::Result<()> {
        write_line(&mut self.steps, record)
    }
}

/// Fans records out to two sinks.
pub struct Tee<'a, A: MetricsSink, B: MetricsSink>(pub &'a mut A, pub &'a mut B);

impl<A: MetricsSink, B: MetricsSink> MetricsSink for Tee<'_, A, B> {
    fn completion(&mut self, record: &CompletionRecord) -> io::Result<()> {
        self.0.completion(record)?;
        self.1.completion(record)
    }

    fn step(&mut self, record: &StepRecord) -> io::Result<()> {
        self.0.step(record)?;
        self.1.step(record)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SchemaError {
    #[error("line {line}: not a JSON object: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: keys {found:?} do not match the {kind} schema")]
    Keys {
        line: usize,
        kind: &'static str,
        found: Vec<String>,
    },
    #[error("line {line}: record field is {found:?}, expected {expected:?}")]
    Kind {
        line: usize,
        found: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Checks that a line carries exactly the fixed key set of its record kind.
pub fn validate_line(line: &str, line_no: usize, kind: &'static str) -> Result<(), SchemaError> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|source| SchemaError::Json {
            line: line_no,
            source,
        })?;
    let obj = value.as_object().ok_or_else(|| SchemaError::Keys {
        line: line_no,
        kind,
        found: vec![],
    })?;
    let expected = match kind {
        COMPLETION_KIND => COMPLETION_KEYS,
        _ => STEP_KEYS,
    };
    let mut found: Vec<String> = obj.keys().cloned().collect();
    found.sort();
    let mut want: Vec<String> = expected.iter().map(|s| s.to_string()).collect();
    want.sort();
    if found != want {
        return Err(SchemaError::Keys {
            line: line_no,
            kind,
            found,
        });
    }
    let record = obj.get("record").and_then(|v| v.as_str()).unwrap_or_default();
    if record != kind {
        return Err(SchemaError::Kind {
            line: line_no,
            found: record.to_string(),
            expected: kind,
        });
    }
    Ok(())
}

/// Reads and schema-checks a line-delimited stream of records.
pub fn read_records<T, R>(reader: R, kind: &'static str) -> Result<Vec<T>, SchemaError>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        validate_line(&line, i + 1, kind)?;
        out.push(serde_json::from_str(&line).map_err(|source| SchemaError::Json {
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

/// Completed-rollout share per domain at the first record reaching `horizon`
/// cumulative completions, or `None` if the stream never gets there.
pub fn mixture_at(records: &[CompletionRecord], num_domains: usize, horizon: u64) -> Option<Vec<f64>> {
    let mut counts = vec![0u64; num_domains];
    let mut prev = 0u64;
    for r in records {
        counts[r.domain] += r.completions - prev;
        prev = r.completions;
        if r.completions >= horizon {
            let total = r.completions as f64;
            return Some(counts.iter().map(|&c| c as f64 / total).collect());
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn completion(domain: usize, completions: u64) -> CompletionRecord {
        CompletionRecord {
            record: COMPLETION_KIND.into(),
            time: completions as f64,
            group_index: completions / 8,
            domain,
            prompt_class: 0,
            difficulty: "easy".into(),
            solve_rate: 0.5,
            mean_length: 3.0,
            mean_raw_reward: 0.5,
            behavior_version: 0,
            retained: true,
            completions,
        }
    }

    #[test]
    fn mixture_at_horizon() {
        let recs = vec![completion(0, 8), completion(1, 16), completion(0, 24), completion(1, 32)];
        assert_eq!(mixture_at(&recs, 2, 24), Some(vec![2.0 / 3.0, 1.0 / 3.0]));
        assert_eq!(mixture_at(&recs, 2, 33), None);
    }

    #[test]
    fn schema_accepts_emitted_completion_lines() {
        let line = serde_json::to_string(&completion(0, 8)).unwrap();
        validate_line(&line, 1, COMPLETION_KIND).unwrap();
        assert!(validate_line(&line, 1, STEP_KIND).is_err());
        let trimmed = line.replace("\"retained\":true,", "");
        assert!(matches!(
            validate_line(&trimmed, 3, COMPLETION_KIND),
            Err(SchemaError::Keys { line: 3, .. })
        ));
        assert!(validate_line("not json", 1, COMPLETION_KIND).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut sink = JsonlSink::new(Vec::new(), Vec::new());
        sink.completion(&completion(1, 8)).unwrap();
        sink.completion(&completion(0, 16)).unwrap();
        let JsonlSink { completions, .. } = sink;
        let back: Vec<CompletionRecord> = read_records(&completions[..], COMPLETION_KIND).unwrap();
        assert_eq!(back, vec![completion(1, 8), completion(0, 16)]);
    }
}
