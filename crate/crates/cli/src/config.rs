//! Run configuration: a TOML file, `--set key=value` overrides, then flags.
//!
//! Unknown keys anywhere in the file are rejected. Relative paths in the file
//! are resolved against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rolegraph_core::datagen::FilterPolicy;
use rolegraph_core::pipeline::Ablations;
use serde::Deserialize;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Remote,
    Scripted,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverChoice {
    Remote,
    #[default]
    Local,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSection {
    pub kind: BackendKind,
    /// Rules file for the scripted backend.
    pub rules: Option<PathBuf>,
    pub model: Option<String>,
    /// Overrides the gateway URL from the environment.
    pub base_url: Option<String>,
    pub timeout_secs: Option<u64>,
    /// Role adapter file; switches the gateway to role-token mode.
    pub adapter: Option<PathBuf>,
    /// Directory with one prompt template per role.
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverSection {
    pub kind: RetrieverChoice,
    pub corpus: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub top_k: usize,
    pub timeout_secs: u64,
}

impl Default for RetrieverSection {
    fn default() -> Self {
        Self { kind: RetrieverChoice::Local, corpus: None, endpoint: None, top_k: 5, timeout_secs: 30 }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub max_new_queries: usize,
    pub width: usize,
    /// Reject multi-sink plans instead of joining them.
    pub strict_graph: bool,
    pub judge_sees_summaries: bool,
    pub ablations: Ablations,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self { max_new_queries: 3, width: 1, strict_graph: false, judge_sees_summaries: true, ablations: Ablations::default() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatchSection {
    pub parallel: usize,
    /// Stop at the first failing item.
    pub fail_fast: bool,
}

impl Default for BatchSection {
    fn default() -> Self {
        Self { parallel: 1, fail_fast: false }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub backend: BackendSection,
    pub retriever: RetrieverSection,
    pub pipeline: PipelineSection,
    pub datagen: FilterPolicy,
    pub batch: BatchSection,
    pub trace_dir: Option<PathBuf>,
}

/// Sets `dotted.key = value` in `table`. The value is read as a TOML value
/// when it parses as one, otherwise as a plain string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), String> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| format!("override {assignment:?} is not key=value"))?;
    let key = key.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key {key:?} is malformed"));
    }
    let last = parts.pop().expect("split yields at least one part");
    let mut cursor = table;
    for part in parts {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| format!("override key {key:?}: {part} is not a table"))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

fn resolve(base: &Path, path: &mut Option<PathBuf>) {
    if let Some(p) = path {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

impl Config {
    /// Loads `path` (if any) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config, String> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                toml::from_str::<toml::Table>(&text).map_err(|e| format!("{}: {e}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut config: Config = table.try_into().map_err(|e: toml::de::Error| {
            let where_ = path.map_or_else(|| "config".to_string(), |p| p.display().to_string());
            format!("{where_}: {}", e.message())
        })?;
        if let Some(base) = path.and_then(Path::parent) {
            resolve(base, &mut config.backend.rules);
            resolve(base, &mut config.backend.adapter);
            resolve(base, &mut config.backend.prompts);
            resolve(base, &mut config.retriever.corpus);
            resolve(base, &mut config.trace_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.retriever.top_k == 0 {
            return Err("retriever.top_k must be at least 1".into());
        }
        if self.pipeline.width == 0 {
            return Err("pipeline.width must be at least 1".into());
        }
        if self.batch.parallel == 0 {
            return Err("batch.parallel must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.datagen.alpha) {
            return Err(format!("datagen.alpha {} is outside [0, 1]", self.datagen.alpha));
        }
        Ok(())
    }
}
