//! Deterministic rule-table backend.
//!
//! Rules file: one JSON object per line,
//! `{"role": "...", "match": "exact" | "substring" | "pattern", "value": "...", "response": "..."}`.
//! Rules for a role are tried in file order; the first match answers. Rules
//! are matched against the prompt's task-input section when it has one (so
//! demonstrations never trigger a rule), otherwise against the whole prompt.
//! Role tokens are appended after matching and never take part in it.

use std::fs;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendCall, GatewayError, RoleId};
use crate::roles::prompts::SECTION_INPUT;

#[derive(Debug, Clone)]
pub enum Matcher {
    Exact(String),
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn pattern(re: &str) -> Result<Self, regex::Error> {
        Regex::new(re).map(Matcher::Pattern)
    }

    fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Exact(s) => prompt == s,
            Matcher::Substring(s) => prompt.contains(s.as_str()),
            Matcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedRule {
    pub role: RoleId,
    pub matcher: Matcher,
    pub response: String,
}

impl ScriptedRule {
    pub fn exact(role: RoleId, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Self { role, matcher: Matcher::Exact(prompt.into()), response: response.into() }
    }

    pub fn substring(role: RoleId, needle: impl Into<String>, response: impl Into<String>) -> Self {
        Self { role, matcher: Matcher::Substring(needle.into()), response: response.into() }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RuleRecord {
    role: RoleId,
    #[serde(rename = "match")]
    kind: MatchKind,
    value: String,
    response: String,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum MatchKind {
    Exact,
    Substring,
    Pattern,
}

/// Parses a rules file.
pub fn load_rules(path: &Path) -> Result<Vec<ScriptedRule>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut rules = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: RuleRecord = serde_json::from_str(line)
            .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
        let matcher = match record.kind {
            MatchKind::Exact => Matcher::Exact(record.value),
            MatchKind::Substring => Matcher::Substring(record.value),
            MatchKind::Pattern => Matcher::pattern(&record.value)
                .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?,
        };
        rules.push(ScriptedRule { role: record.role, matcher, response: record.response });
    }
    Ok(rules)
}

#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    rules: Vec<ScriptedRule>,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<ScriptedRule>) -> Self {
        Self { rules }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        load_rules(path).map(Self::new)
    }

    pub fn push(&mut self, rule: ScriptedRule) {
        self.rules.push(rule);
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    pub fn respond(&self, role: RoleId, prompt: &str) -> Option<&str> {
        let prompt = match_target(prompt);
        self.rules
            .iter()
            .find(|r| r.role == role && r.matcher.matches(prompt))
            .map(|r| r.response.as_str())
    }
}

fn match_target(prompt: &str) -> &str {
    let header = format!("{SECTION_INPUT}\n");
    match prompt.rfind(&header) {
        Some(at) => &prompt[at + header.len()..],
        None => prompt,
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, GatewayError> {
        let request = call.request;
        self.respond(request.role, &request.prompt)
            .map(str::to_string)
            .ok_or_else(|| GatewayError::NoScriptMatch {
                role: request.role,
                excerpt: match_target(&request.prompt).chars().take(80).collect(),
            })
    }
}
