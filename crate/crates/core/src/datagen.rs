//! Training-data collection: run the pipeline with an expert backend, score
//! each final answer, and keep every role invocation of the runs that clear
//! the threshold.
//!
//! Output directory layout: one `<role>.jsonl` file per role (all six, even
//! when empty) and a `manifest.json` with the policy, config and counts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{exact_match, f1, QAItem};
use crate::gateway::RoleId;
use crate::pipeline::{BatchError, Pipeline, PipelineConfig, RetrievalDecision, RunResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid filter policy: {0}")]
    InvalidPolicy(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error("{file}:{line}: {reason}")]
    SchemaViolation { file: String, line: usize, reason: String },
    #[error("{file}:{line}: score {score} is below alpha {alpha}")]
    ThresholdViolation { file: String, line: usize, score: f64, alpha: f64 },
    #[error("count inconsistency: {0}")]
    CountInconsistency(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatagenError + '_ {
    move |source| DatagenError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSample {
    pub task: RoleId,
    /// The role's task input without the instruction prologue.
    pub input: String,
    pub output: String,
    pub source_item_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMetric {
    Em,
    #[default]
    F1,
}

impl ScoreMetric {
    pub fn score(self, prediction: &str, golden_answers: &[String]) -> f64 {
        match self {
            ScoreMetric::Em => exact_match(prediction, golden_answers),
            ScoreMetric::F1 => f1(prediction, golden_answers),
        }
    }
}

impl FromStr for ScoreMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "em" => Ok(ScoreMetric::Em),
            "f1" => Ok(ScoreMetric::F1),
            other => Err(format!("unknown metric {other:?} (expected em or f1)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterPolicy {
    pub metric: ScoreMetric,
    pub alpha: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self { metric: ScoreMetric::F1, alpha: 0.7 }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), DatagenError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DatagenError::InvalidPolicy(format!("alpha {} is outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedItem {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub policy: FilterPolicy,
    pub config: PipelineConfig,
    pub items: usize,
    pub succeeded: usize,
    pub failed: Vec<FailedItem>,
    /// Successful runs whose graph builder fell back to the single-node plan.
    /// Their builder output was unusable, so the whole run is left out.
    pub excluded_fallback: usize,
    pub retained_runs: usize,
    /// Retained runs over successful runs.
    pub retention_rate: f64,
    pub retained_item_ids: Vec<String>,
    /// Sub-queries resolved across retained runs, refinements included.
    pub resolved_sub_queries: usize,
    /// Of those, the ones that retrieved at least one passage.
    pub retrieved_sub_queries: usize,
    pub new_query_calls: usize,
    pub counts: BTreeMap<RoleId, usize>,
}

/// The samples a retained run contributes, in call order. Rejected graph
/// builder attempts are dropped; only the accepted reply is kept.
pub fn samples_from_run(run: &RunResult, item_id: &str, score: f64) -> Vec<TrainingSample> {
    let accepted_builder = run.calls.iter().rposition(|c| c.role == RoleId::GraphBuilder);
    run.calls
        .iter()
        .enumerate()
        .filter(|(i, c)| c.role != RoleId::GraphBuilder || Some(*i) == accepted_builder)
        .map(|(_, c)| TrainingSample {
            task: c.role,
            input: c.payload.clone(),
            output: c.output.clone(),
            source_item_id: item_id.to_string(),
            score,
        })
        .collect()
}

fn retrieved_count(run: &RunResult) -> usize {
    run.events
        .iter()
        .filter(|e| e.decision != RetrievalDecision::Direct && !e.passage_ids.is_empty())
        .count()
}

/// Runs the pipeline over `items`, writes the per-task files and manifest
/// into `out_dir`, and returns the manifest.
pub fn collect(
    pipeline: &Pipeline,
    items: &[QAItem],
    config: &PipelineConfig,
    policy: FilterPolicy,
    out_dir: &Path,
    parallel: usize,
) -> Result<Manifest, DatagenError> {
    policy.validate()?;
    if items.is_empty() {
        return Err(DatagenError::EmptyDataset);
    }
    let batch = pipeline.run_batch(items, config, parallel, false)?;

    let mut per_task: BTreeMap<RoleId, Vec<TrainingSample>> = RoleId::ALL.iter().map(|r| (*r, Vec::new())).collect();
    let mut manifest = Manifest {
        policy,
        config: config.clone(),
        items: items.len(),
        succeeded: 0,
        failed: Vec::new(),
        excluded_fallback: 0,
        retained_runs: 0,
        retention_rate: 0.0,
        retained_item_ids: Vec::new(),
        resolved_sub_queries: 0,
        retrieved_sub_queries: 0,
        new_query_calls: 0,
        counts: BTreeMap::new(),
    };

    for (item, outcome) in items.iter().zip(&batch.outcomes) {
        let Some(run) = &outcome.result else {
            manifest.failed.push(FailedItem {
                id: item.id.clone(),
                error: outcome.error.clone().unwrap_or_default(),
            });
            continue;
        };
        manifest.succeeded += 1;
        if run.telemetry.builder_fallback {
            manifest.excluded_fallback += 1;
            continue;
        }
        let score = policy.metric.score(&run.final_answer, &item.golden_answers);
        if score < policy.alpha {
            continue;
        }
        manifest.retained_runs += 1;
        manifest.retained_item_ids.push(item.id.clone());
        manifest.resolved_sub_queries += run.telemetry.judged_sub_queries;
        manifest.retrieved_sub_queries += retrieved_count(run);
        manifest.new_query_calls += run.telemetry.new_query_calls;
        for sample in samples_from_run(run, &item.id, score) {
            per_task.get_mut(&sample.task).expect("all roles present").push(sample);
        }
    }
    manifest.retention_rate = if manifest.succeeded == 0 {
        0.0
    } else {
        manifest.retained_runs as f64 / manifest.succeeded as f64
    };
    manifest.counts = per_task.iter().map(|(r, s)| (*r, s.len())).collect();

    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    for (role, samples) in &per_task {
        let path = out_dir.join(format!("{role}.jsonl"));
        let mut buf = Vec::new();
        for s in samples {
            serde_json::to_writer(&mut buf, s).expect("samples always serialize");
            buf.push(b'\n');
        }
        fs::File::create(&path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(io_err(&path))?;
    }
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest always serializes");
    fs::write(&path, text + "\n").map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub counts: BTreeMap<RoleId, usize>,
    pub retained_runs: usize,
    pub alpha: f64,
}

impl CorpusReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<16} {:>8}\n", "task", "samples");
        for (role, n) in &self.counts {
            out.push_str(&format!("{:<16} {:>8}\n", role.as_str(), n));
        }
        out.push_str(&format!("{:<16} {:>8}\n", "retained runs", self.retained_runs));
        out
    }
}

/// Checks a collected corpus: every line parses as a sample of its file's
/// task, every score clears the manifest's alpha, and the per-task counts
/// are consistent with each other and with the manifest.
pub fn validate_corpus(dir: &Path) -> Result<CorpusReport, DatagenError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DatagenError::SchemaViolation {
        file: MANIFEST_FILE.into(),
        line: e.line(),
        reason: e.to_string(),
    })?;
    let alpha = manifest.policy.alpha;

    let mut counts = BTreeMap::new();
    let mut reasoner_items = Vec::new();
    for role in RoleId::ALL {
        let file = format!("{role}.jsonl");
        let path = dir.join(&file);
        let reader = BufReader::new(fs::File::open(&path).map_err(io_err(&path))?);
        let mut n = 0;
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let schema = |reason: String| DatagenError::SchemaViolation { file: file.clone(), line: lineno, reason };
            let sample: TrainingSample = serde_json::from_str(&line).map_err(|e| schema(e.to_string()))?;
            if sample.task != role {
                return Err(schema(format!("sample task {} in the {role} file", sample.task)));
            }
            if !(0.0..=1.0).contains(&sample.score) {
                return Err(schema(format!("score {} is outside [0, 1]", sample.score)));
            }
            if sample.score < alpha {
                return Err(DatagenError::ThresholdViolation { file, line: lineno, score: sample.score, alpha });
            }
            if role == RoleId::Reasoner {
                reasoner_items.push(sample.source_item_id);
            }
            n += 1;
        }
        counts.insert(role, n);
    }

    let ab = manifest.config.ablations;
    let runs = manifest.retained_runs;
    let expect = |role: RoleId, want: usize, what: &str| -> Result<(), DatagenError> {
        let got = counts[&role];
        if got == want {
            Ok(())
        } else {
            Err(DatagenError::CountInconsistency(format!("{role} has {got} samples, expected {want} ({what})")))
        }
    };
    expect(RoleId::SubAnswer, manifest.resolved_sub_queries, "resolved sub-queries")?;
    expect(
        RoleId::RetrievalJudge,
        if ab.no_judge { 0 } else { counts[&RoleId::SubAnswer] },
        "one per sub-answer",
    )?;
    expect(
        RoleId::Summarizer,
        if ab.no_summarizer { 0 } else { manifest.retrieved_sub_queries },
        "retrieved sub-queries",
    )?;
    if counts[&RoleId::Summarizer] > counts[&RoleId::SubAnswer] {
        return Err(DatagenError::CountInconsistency("more summaries than sub-answers".into()));
    }
    expect(RoleId::Reasoner, runs, "retained runs")?;
    expect(RoleId::GraphBuilder, if ab.no_graph { 0 } else { runs }, "retained runs")?;
    expect(RoleId::NewQuery, if ab.no_new_query { 0 } else { manifest.new_query_calls }, "new-query calls")?;
    reasoner_items.sort();
    reasoner_items.dedup();
    if reasoner_items.len() != runs {
        return Err(DatagenError::CountInconsistency(format!(
            "reasoner samples come from {} items, expected {runs}",
            reasoner_items.len()
        )));
    }
    if counts != manifest.counts {
        return Err(DatagenError::CountInconsistency("file counts differ from the manifest".into()));
    }
    Ok(CorpusReport { counts, retained_runs: runs, alpha })
}
