//! QA scoring: SQuAD-style normalization, exact match and token F1, dataset
//! loading, and per-hop reports.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("{0}")]
    Io(String),
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: missing field {field}")]
    MissingField { line: usize, field: String },
    #[error("results and dataset ids differ: {0}")]
    IdMismatch(String),
}

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, collapse
/// whitespace.
pub fn normalize(text: &str) -> String {
    let lowered = text.to_lowercase();
    let no_punct: String = lowered.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, golden_answers: &[String]) -> f64 {
    let pred = normalize(prediction);
    if golden_answers.iter().any(|g| normalize(g) == pred) {
        1.0
    } else {
        0.0
    }
}

fn token_f1(prediction: &str, gold: &str) -> f64 {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
    let gold_tokens: Vec<&str> = gold.split_whitespace().collect();
    match (pred_tokens.is_empty(), gold_tokens.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *gold_counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred_tokens {
        if let Some(c) = gold_counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best token-level F1 against any golden answer.
pub fn f1(prediction: &str, golden_answers: &[String]) -> f64 {
    golden_answers
        .iter()
        .map(|g| token_f1(prediction, g))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAItem {
    pub id: String,
    pub question: String,
    pub golden_answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hop_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_decomposition: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    /// One JSON record per line: `{id, question, golden_answers, metadata?}`.
    #[default]
    Jsonl,
    /// A single JSON array of the same records.
    JsonArray,
}

fn parse_item(value: serde_json::Value, line: usize) -> Result<QAItem, EvalError> {
    let obj = value.as_object().ok_or_else(|| EvalError::MalformedLine {
        line,
        reason: "record is not an object".into(),
    })?;
    let missing = |field: &str| EvalError::MissingField { line, field: field.into() };
    let text = |v: &serde_json::Value| match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    };
    let id = obj.get("id").and_then(text).ok_or_else(|| missing("id"))?;
    let question = obj.get("question").and_then(text).ok_or_else(|| missing("question"))?;
    let golden_answers: Vec<String> = obj
        .get("golden_answers")
        .and_then(|v| v.as_array())
        .map(|a| a.iter().filter_map(text).collect())
        .filter(|a: &Vec<String>| !a.is_empty())
        .ok_or_else(|| missing("golden_answers"))?;
    let metadata = obj.get("metadata");
    let hop_count = metadata
        .and_then(|m| m.get("hops"))
        .and_then(|h| h.as_u64())
        .map(|h| h as u32);
    let gold_decomposition = metadata.and_then(|m| m.get("decomposition")).and_then(|d| d.as_array()).map(|a| {
        a.iter()
            .filter_map(|step| match step {
                serde_json::Value::String(s) => Some(s.clone()),
                serde_json::Value::Object(o) => o.get("question").and_then(|q| q.as_str()).map(str::to_string),
                _ => None,
            })
            .collect()
    });
    Ok(QAItem { id, question, golden_answers, hop_count, gold_decomposition })
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Vec<QAItem>, EvalError> {
    let raw = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    match format {
        DatasetFormat::Jsonl => {
            let mut items = Vec::new();
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let value: serde_json::Value = serde_json::from_str(line)
                    .map_err(|e| EvalError::MalformedLine { line: i + 1, reason: e.to_string() })?;
                items.push(parse_item(value, i + 1)?);
            }
            Ok(items)
        }
        DatasetFormat::JsonArray => {
            let values: Vec<serde_json::Value> = serde_json::from_str(&raw)
                .map_err(|e| EvalError::MalformedLine { line: 1, reason: e.to_string() })?;
            values.into_iter().enumerate().map(|(i, v)| parse_item(v, i + 1)).collect()
        }
    }
}

/// Minimum pairwise token F1 for two sub-questions to count as the same step.
pub const ALIGNMENT_F1_THRESHOLD: f64 = 0.6;

/// Heuristic agreement between a predicted decomposition and a reference one:
/// equal step counts, and a greedy one-to-one matching (highest pair F1
/// first) in which every matched pair reaches [`ALIGNMENT_F1_THRESHOLD`].
pub fn decomposition_alignment(predicted: &[String], gold: &[String]) -> bool {
    if predicted.len() != gold.len() {
        return false;
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(predicted.len() * gold.len());
    for (i, p) in predicted.iter().enumerate() {
        for (j, g) in gold.iter().enumerate() {
            pairs.push((token_f1(p, g), i, j));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = HashSet::new();
    let mut used_g = HashSet::new();
    for (score, i, j) in pairs {
        if used_p.contains(&i) || used_g.contains(&j) {
            continue;
        }
        if score < ALIGNMENT_F1_THRESHOLD {
            return false;
        }
        used_p.insert(i);
        used_g.insert(j);
    }
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(alias = "final_answer")]
    pub prediction: String,
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    let raw = fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EvalError::MalformedLine { line: i + 1, reason: e.to_string() }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemScore {
    pub id: String,
    pub em: f64,
    pub f1: f64,
    pub hop_count: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRow {
    pub hops: u32,
    pub count: usize,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub count: usize,
    pub em: f64,
    pub f1: f64,
    pub per_item: Vec<ItemScore>,
    pub by_hops: Vec<HopRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores predictions against the dataset. Both sides must cover exactly
/// the same ids.
pub fn report(results: &[Prediction], items: &[QAItem]) -> Result<ScoreReport, EvalError> {
    let by_id: HashMap<&str, &QAItem> = items.iter().map(|i| (i.id.as_str(), i)).collect();
    let mut seen = HashSet::new();
    let mut per_item = Vec::with_capacity(results.len());
    for r in results {
        let item = by_id
            .get(r.id.as_str())
            .ok_or_else(|| EvalError::IdMismatch(format!("prediction {:?} has no dataset item", r.id)))?;
        if !seen.insert(r.id.as_str()) {
            return Err(EvalError::IdMismatch(format!("prediction {:?} appears twice", r.id)));
        }
        per_item.push(ItemScore {
            id: r.id.clone(),
            em: exact_match(&r.prediction, &item.golden_answers),
            f1: f1(&r.prediction, &item.golden_answers),
            hop_count: item.hop_count,
        });
    }
    if let Some(missing) = items.iter().find(|i| !seen.contains(i.id.as_str())) {
        return Err(EvalError::IdMismatch(format!("dataset item {:?} has no prediction", missing.id)));
    }

    let mut buckets: BTreeMap<u32, Vec<&ItemScore>> = BTreeMap::new();
    for s in &per_item {
        if let Some(h) = s.hop_count {
            buckets.entry(h).or_default().push(s);
        }
    }
    let by_hops = buckets
        .into_iter()
        .map(|(hops, scores)| HopRow {
            hops,
            count: scores.len(),
            em: mean(scores.iter().map(|s| s.em)),
            f1: mean(scores.iter().map(|s| s.f1)),
        })
        .collect();
    Ok(ScoreReport {
        count: per_item.len(),
        em: mean(per_item.iter().map(|s| s.em)),
        f1: mean(per_item.iter().map(|s| s.f1)),
        per_item,
        by_hops,
    })
}

impl ScoreReport {
    /// Aligned text table; with `by_hops` one row per hop bucket follows the
    /// overall row.
    pub fn to_table(&self, by_hops: bool) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>7} {:>8} {:>8}", "subset", "count", "EM", "F1");
        let _ = writeln!(out, "{:<10} {:>7} {:>8.4} {:>8.4}", "all", self.count, self.em, self.f1);
        if by_hops {
            for row in &self.by_hops {
                let label = format!("{}-hop", row.hops);
                let _ = writeln!(out, "{:<10} {:>7} {:>8.4} {:>8.4}", label, row.count, row.em, row.f1);
            }
        }
        out
    }
}
