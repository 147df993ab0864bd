//! Prompt templates and their assembly.
//!
//! Each role has one TOML template with five parts: task description,
//! output requirements, guidelines, demonstrations and the task input. The
//! task input holds slot markers `{{input:<name>}}` that are filled from the
//! role's declared inputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{ActivationMode, RoleId};

static SLOT_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{\{input:([a-z_]+)\}\}").expect("slot regex is valid"));

pub const SECTION_TASK: &str = "### Task description";
pub const SECTION_OUTPUT: &str = "### Output requirements";
pub const SECTION_GUIDELINES: &str = "### Guidelines";
pub const SECTION_DEMONSTRATIONS: &str = "### Demonstrations";
pub const SECTION_INPUT: &str = "### Task input";

/// Section headers in the order they appear in every prompt.
pub const SECTIONS: [&str; 5] =
    [SECTION_TASK, SECTION_OUTPUT, SECTION_GUIDELINES, SECTION_DEMONSTRATIONS, SECTION_INPUT];

const BUILTIN: [(RoleId, &str); 6] = [
    (RoleId::GraphBuilder, include_str!("../../prompts/graph_builder.toml")),
    (RoleId::RetrievalJudge, include_str!("../../prompts/retrieval_judge.toml")),
    (RoleId::SubAnswer, include_str!("../../prompts/sub_answer.toml")),
    (RoleId::Summarizer, include_str!("../../prompts/summarizer.toml")),
    (RoleId::NewQuery, include_str!("../../prompts/new_query.toml")),
    (RoleId::Reasoner, include_str!("../../prompts/reasoner.toml")),
];

/// Inputs each role's task-input section may reference.
pub fn declared_inputs(role: RoleId) -> &'static [&'static str] {
    match role {
        RoleId::GraphBuilder => &["query"],
        RoleId::RetrievalJudge => &["sub_query", "memory"],
        RoleId::SubAnswer | RoleId::Summarizer => &["sub_query", "passages"],
        RoleId::NewQuery | RoleId::Reasoner => &["query", "memory"],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub input: String,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub role: RoleId,
    pub task_description: String,
    pub output_requirements: String,
    pub guidelines: String,
    #[serde(default)]
    pub demonstrations: Vec<Demonstration>,
    pub task_input: String,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub stop: Vec<String>,
}

fn default_max_tokens() -> u32 {
    256
}

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self, String> {
        let template: PromptTemplate = toml::from_str(text).map_err(|e| e.to_string())?;
        template.validate()?;
        Ok(template)
    }

    fn validate(&self) -> Result<(), String> {
        for (name, part) in [
            ("task_description", &self.task_description),
            ("output_requirements", &self.output_requirements),
            ("guidelines", &self.guidelines),
            ("task_input", &self.task_input),
        ] {
            if part.trim().is_empty() {
                return Err(format!("{}: {name} is empty", self.role));
            }
        }
        let declared = declared_inputs(self.role);
        for slot in self.slots() {
            if !declared.contains(&slot.as_str()) {
                return Err(format!("{}: slot {{{{input:{slot}}}}} is not a declared input", self.role));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> Vec<String> {
        SLOT_RE.captures_iter(&self.task_input).map(|c| c[1].to_string()).collect()
    }

    /// Fills the task-input section. Unknown slots are left as written.
    pub fn fill_input(&self, inputs: &BTreeMap<&str, String>) -> String {
        SLOT_RE
            .replace_all(&self.task_input, |c: &regex::Captures<'_>| {
                inputs.get(&c[1]).cloned().unwrap_or_else(|| c[0].to_string())
            })
            .into_owned()
    }

    /// Renders all five parts in order. Demonstrations are listed only in
    /// instruction-prompt mode; with role tokens the section reads `(none)`.
    pub fn assemble(&self, filled_input: &str, mode: ActivationMode) -> String {
        let mut out = String::new();
        out.push_str(SECTION_TASK);
        out.push('\n');
        out.push_str(self.task_description.trim());
        out.push_str("\n\n");
        out.push_str(SECTION_OUTPUT);
        out.push('\n');
        out.push_str(self.output_requirements.trim());
        out.push_str("\n\n");
        out.push_str(SECTION_GUIDELINES);
        out.push('\n');
        out.push_str(self.guidelines.trim());
        out.push_str("\n\n");
        out.push_str(SECTION_DEMONSTRATIONS);
        out.push('\n');
        match mode {
            ActivationMode::InstructionPrompt if !self.demonstrations.is_empty() => {
                for (i, demo) in self.demonstrations.iter().enumerate() {
                    if i > 0 {
                        out.push_str("\n\n");
                    }
                    out.push_str(&format!(
                        "Example {}\nInput:\n{}\nOutput:\n{}",
                        i + 1,
                        demo.input.trim(),
                        demo.output.trim()
                    ));
                }
            }
            _ => out.push_str("(none)"),
        }
        out.push_str("\n\n");
        out.push_str(SECTION_INPUT);
        out.push('\n');
        out.push_str(filled_input);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRegistry {
    templates: BTreeMap<RoleId, PromptTemplate>,
}

impl PromptRegistry {
    /// The templates shipped with the crate.
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(role, text)| {
                let t = PromptTemplate::parse(text).unwrap_or_else(|e| panic!("builtin {role} template: {e}"));
                assert_eq!(t.role, *role, "builtin template declares the wrong role");
                (*role, t)
            })
            .collect();
        Self { templates }
    }

    /// Loads `<role>.toml` for every role from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self, String> {
        let mut templates = BTreeMap::new();
        for role in RoleId::ALL {
            let path = dir.join(format!("{role}.toml"));
            let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
            let template = PromptTemplate::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?;
            if template.role != role {
                return Err(format!("{}: declares role {}", path.display(), template.role));
            }
            templates.insert(role, template);
        }
        Ok(Self { templates })
    }

    pub fn get(&self, role: RoleId) -> &PromptTemplate {
        &self.templates[&role]
    }
}

impl Default for PromptRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}
