//! The six role adapters. Each one fills its prompt template, calls the
//! gateway and parses the reply into a typed result.
//!
//! Every invocation also yields a [`RoleCall`] record: the role's task input
//! (without instructions), the raw reply, and token tallies used by telemetry,
//! training-data collection and the cost comparison.

pub mod prompts;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, GenerationRequest, RoleId};
use crate::graph::{parse_graph, single_node_graph, GraphError, GraphMode, QueryGraph};
use crate::memory::AnswerMemory;
use crate::retrieval::{first_passage, Passage};

pub use prompts::{PromptRegistry, PromptTemplate};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoleError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// One role invocation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleCall {
    pub role: RoleId,
    /// The filled task-input section; what a training sample stores as input.
    pub payload: String,
    pub output: String,
    /// Tokens in the full transmitted input.
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    /// Input tokens counted the way the analytic cost model counts them.
    pub accounted_in: usize,
    pub accounted_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeDecision {
    pub answerable_directly: bool,
    pub raw: String,
    /// Set when the reply had no recognizable yes/no token.
    pub unparsed: bool,
}

/// Reads a yes/no reply from its first token. Anything else means retrieve.
pub fn parse_judgment(raw: &str) -> JudgeDecision {
    let first: String = raw
        .split_whitespace()
        .next()
        .unwrap_or("")
        .chars()
        .filter(|c| c.is_alphanumeric())
        .collect::<String>()
        .to_lowercase();
    let (answerable_directly, unparsed) = match first.as_str() {
        "yes" | "true" => (true, false),
        "no" | "false" => (false, false),
        _ => (false, true),
    };
    JudgeDecision { answerable_directly, raw: raw.to_string(), unparsed }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "text")]
pub enum NewQueryOutcome {
    NewQuery(String),
    Terminate,
}

/// `None` in any case, with surrounding quotes or trailing punctuation,
/// terminates; so does an empty reply. Otherwise the first non-empty line is
/// the new question.
pub fn parse_new_query(raw: &str) -> NewQueryOutcome {
    let line = raw.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let bare = line
        .trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace())
        .to_lowercase();
    if bare.is_empty() || bare == "none" {
        NewQueryOutcome::Terminate
    } else {
        NewQueryOutcome::NewQuery(line.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuilderOutcome {
    pub graph: QueryGraph,
    /// The builder output was unusable twice and the single-node plan is used.
    pub fallback: bool,
    pub retried: bool,
    /// Why the last failed attempt was rejected, if any attempt failed.
    pub last_error: Option<String>,
    /// The accepted call, absent on fallback.
    pub accepted: Option<RoleCall>,
    pub calls: Vec<RoleCall>,
}

/// Renders retrieved passages for the sub-answer and summarizer inputs.
pub fn render_passages(passages: &[Passage]) -> String {
    if passages.is_empty() {
        return String::new();
    }
    let mut out = String::from("\n\nRetrieved passages:");
    for (i, p) in passages.iter().enumerate() {
        out.push_str(&format!("\n[Passage {}] {}\n{}", i + 1, p.title, p.text));
    }
    out
}

const REPAIR_INSTRUCTION: &str = "### Repair\nYour previous reply could not be used";

#[derive(Debug, Clone)]
pub struct Roles {
    gateway: Gateway,
    registry: PromptRegistry,
    /// Whether memory shown to the judge includes summaries.
    pub judge_sees_summaries: bool,
}

impl Roles {
    pub fn new(gateway: Gateway, registry: PromptRegistry) -> Self {
        Self { gateway, registry, judge_sees_summaries: true }
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn registry(&self) -> &PromptRegistry {
        &self.registry
    }

    fn tokens(&self, text: &str) -> usize {
        self.gateway.count_tokens(text)
    }

    fn memory_tokens(&self, memory: &AnswerMemory) -> usize {
        memory
            .entries()
            .map(|e| {
                self.tokens(&e.question) + self.tokens(&e.answer) + e.summary.as_deref().map_or(0, |s| self.tokens(s))
            })
            .sum()
    }

    fn passage_tokens(&self, passages: &[Passage]) -> usize {
        passages.iter().map(|p| self.tokens(&p.text)).sum()
    }

    /// Builds `role`'s prompt for the given inputs: (full prompt, task input).
    pub fn prompt(&self, role: RoleId, inputs: &BTreeMap<&str, String>) -> (String, String) {
        let template = self.registry.get(role);
        let payload = template.fill_input(inputs);
        let prompt = template.assemble(&payload, self.gateway.mode());
        (prompt, payload)
    }

    fn invoke(
        &self,
        role: RoleId,
        prompt: String,
        payload: String,
        accounted_in: usize,
    ) -> Result<(String, RoleCall), RoleError> {
        let template = self.registry.get(role);
        let request = GenerationRequest {
            role,
            prompt,
            max_tokens: template.max_tokens,
            temperature: 0.0,
            stop: template.stop.clone(),
        };
        let generation = self.gateway.generate(&request)?;
        let call = RoleCall {
            role,
            payload,
            prompt_tokens: self.tokens(&generation.input),
            output_tokens: self.tokens(&generation.text),
            accounted_in,
            accounted_out: self.tokens(&generation.text),
            output: generation.text.clone(),
        };
        Ok((generation.text, call))
    }

    /// Decomposes `query` into a graph. An unusable reply is retried once
    /// with a repair note; a second failure falls back to the single-node
    /// plan, except in strict mode where the error is returned.
    pub fn run_graph_builder(&self, query: &str, mode: GraphMode) -> Result<BuilderOutcome, RoleError> {
        let inputs = BTreeMap::from([("query", query.to_string())]);
        let (prompt, payload) = self.prompt(RoleId::GraphBuilder, &inputs);
        let accounted_in = self.tokens(query);

        let mut calls = Vec::new();
        let mut last_error = None;
        for attempt in 0..2 {
            let attempt_prompt = match &last_error {
                None => prompt.clone(),
                Some(err) => format!(
                    "{prompt}\n\n{REPAIR_INSTRUCTION} ({err}). Reply with only the JSON array described in the output requirements."
                ),
            };
            let (text, mut call) = self.invoke(RoleId::GraphBuilder, attempt_prompt, payload.clone(), accounted_in)?;
            match parse_graph(&text, query, mode) {
                Ok(graph) => {
                    call.accounted_out = graph.nodes.iter().map(|n| self.tokens(&n.template)).sum();
                    calls.push(call.clone());
                    return Ok(BuilderOutcome {
                        graph,
                        fallback: false,
                        retried: attempt > 0,
                        last_error,
                        accepted: Some(call),
                        calls,
                    });
                }
                Err(e) => {
                    tracing::debug!(attempt, error = %e, "graph builder output rejected");
                    calls.push(call);
                    if attempt == 1 && mode == GraphMode::Strict {
                        return Err(e.into());
                    }
                    last_error = Some(e.to_string());
                }
            }
        }
        Ok(BuilderOutcome {
            graph: single_node_graph(query),
            fallback: true,
            retried: true,
            last_error,
            accepted: None,
            calls,
        })
    }

    pub fn run_judge(&self, sub_query: &str, memory: &AnswerMemory) -> Result<(JudgeDecision, RoleCall), RoleError> {
        let inputs = BTreeMap::from([
            ("sub_query", sub_query.to_string()),
            ("memory", memory.render_for_prompt(self.judge_sees_summaries)),
        ]);
        let (prompt, payload) = self.prompt(RoleId::RetrievalJudge, &inputs);
        let (text, call) = self.invoke(RoleId::RetrievalJudge, prompt, payload, self.tokens(sub_query))?;
        Ok((parse_judgment(&text), call))
    }

    /// Answers one sub-query; `passages` is `None` on the direct path.
    pub fn run_sub_answer(&self, sub_query: &str, passages: Option<&[Passage]>) -> Result<(String, RoleCall), RoleError> {
        let passages = passages.unwrap_or(&[]);
        let inputs = BTreeMap::from([
            ("sub_query", sub_query.to_string()),
            ("passages", render_passages(passages)),
        ]);
        let (prompt, payload) = self.prompt(RoleId::SubAnswer, &inputs);
        let accounted_in = self.tokens(sub_query) + self.passage_tokens(passages);
        let (text, call) = self.invoke(RoleId::SubAnswer, prompt, payload, accounted_in)?;
        Ok((text.trim().to_string(), call))
    }

    /// Condenses `passages`. Returns `None` when there is nothing to
    /// summarize. With `use_first_passage` the first passage's text is used
    /// verbatim and no call is made.
    pub fn run_summarizer(
        &self,
        sub_query: &str,
        passages: &[Passage],
        use_first_passage: bool,
    ) -> Result<Option<(String, Option<RoleCall>)>, RoleError> {
        if passages.is_empty() {
            return Ok(None);
        }
        if use_first_passage {
            let head = first_passage(passages).expect("passages checked nonempty");
            return Ok(Some((head.text.clone(), None)));
        }
        let inputs = BTreeMap::from([
            ("sub_query", sub_query.to_string()),
            ("passages", render_passages(passages)),
        ]);
        let (prompt, payload) = self.prompt(RoleId::Summarizer, &inputs);
        let (text, call) = self.invoke(RoleId::Summarizer, prompt, payload, self.passage_tokens(passages))?;
        Ok(Some((text.trim().to_string(), Some(call))))
    }

    pub fn run_new_query(&self, origin: &str, memory: &AnswerMemory) -> Result<(NewQueryOutcome, RoleCall), RoleError> {
        let inputs = BTreeMap::from([("query", origin.to_string()), ("memory", memory.render_for_prompt(true))]);
        let (prompt, payload) = self.prompt(RoleId::NewQuery, &inputs);
        let (text, call) = self.invoke(RoleId::NewQuery, prompt, payload, self.memory_tokens(memory))?;
        Ok((parse_new_query(&text), call))
    }

    pub fn run_reasoner(&self, origin: &str, memory: &AnswerMemory) -> Result<(String, RoleCall), RoleError> {
        let inputs = BTreeMap::from([("query", origin.to_string()), ("memory", memory.render_for_prompt(true))]);
        let (prompt, payload) = self.prompt(RoleId::Reasoner, &inputs);
        let (text, call) = self.invoke(RoleId::Reasoner, prompt, payload, self.memory_tokens(memory))?;
        Ok((text.trim().to_string(), call))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{ScriptedBackend, ScriptedRule};
    use crate::graph::NodeId;
    use crate::memory::{MemoryEntry, EMPTY_MEMORY_SENTINEL};
    use proptest::prelude::*;
    use std::sync::{Arc, Mutex};

    fn roles(rules: Vec<ScriptedRule>) -> Roles {
        Roles::new(Gateway::new(Arc::new(ScriptedBackend::new(rules))), PromptRegistry::builtin())
    }

    fn passage(id: &str, text: &str) -> Passage {
        Passage { id: id.into(), title: format!("Title {id}"), text: text.into(), score: 1.0 }
    }

    /// Records every prompt it is sent and answers with a fixed reply.
    struct Recorder {
        reply: String,
        seen: Mutex<Vec<String>>,
    }

    impl crate::gateway::Backend for Recorder {
        fn complete(&self, call: &crate::gateway::BackendCall<'_>) -> Result<String, GatewayError> {
            self.seen.lock().unwrap().push(call.request.prompt.clone());
            Ok(self.reply.clone())
        }
    }

    fn recording(reply: &str) -> (Roles, Arc<Recorder>) {
        let rec = Arc::new(Recorder { reply: reply.into(), seen: Mutex::new(Vec::new()) });
        (Roles::new(Gateway::new(rec.clone()), PromptRegistry::builtin()), rec)
    }

    fn input_section(prompt: &str) -> &str {
        &prompt[prompt.find(prompts::SECTION_INPUT).unwrap()..]
    }

    const FIGURE_PAYLOAD: &str = r#"[{"id":"Q1","question":"Who directed Inception?","dependencies":[]},
        {"id":"Q2","question":"Who directed Interstellar?","dependencies":[]},
        {"id":"Q3","question":"Are Q1.answer and Q2.answer the same person?","dependencies":["Q1","Q2"]}]"#;

    #[test]
    fn builder_parses_scripted_graph() {
        let r = roles(vec![ScriptedRule::substring(RoleId::GraphBuilder, "Inception and Interstellar", FIGURE_PAYLOAD)]);
        let out = r
            .run_graph_builder("Were the directors of Inception and Interstellar the same person?", GraphMode::Lenient)
            .unwrap();
        assert_eq!(out.graph.len(), 3);
        assert!(!out.fallback && !out.retried);
        assert_eq!(out.calls.len(), 1);
    }

    #[test]
    fn builder_falls_back_after_two_failures() {
        let r = roles(vec![ScriptedRule::substring(RoleId::GraphBuilder, "Question: ", "I cannot do that")]);
        let out = r.run_graph_builder("who is X?", GraphMode::Lenient).unwrap();
        assert!(out.fallback);
        assert_eq!(out.graph, single_node_graph("who is X?"));
        assert_eq!(out.calls.len(), 2);
        assert!(out.accepted.is_none());
    }

    #[test]
    fn builder_repair_prompt_can_succeed() {
        let r = roles(vec![
            ScriptedRule::substring(RoleId::GraphBuilder, REPAIR_INSTRUCTION, r#"[{"id":"Q1","question":"who is X?","dependencies":[]}]"#),
            ScriptedRule::substring(RoleId::GraphBuilder, "Question: ", "garbage"),
        ]);
        let out = r.run_graph_builder("who is X?", GraphMode::Lenient).unwrap();
        assert!(out.retried && !out.fallback);
        assert!(out.last_error.is_some());
    }

    #[test]
    fn builder_single_node_payload() {
        let r = roles(vec![ScriptedRule::substring(
            RoleId::GraphBuilder,
            "Question: ",
            r#"[{"id":"Q1","question":"Who wrote Dracula?","dependencies":[]}]"#,
        )]);
        assert_eq!(r.run_graph_builder("Who wrote Dracula?", GraphMode::Strict).unwrap().graph.len(), 1);
    }

    #[test]
    fn strict_builder_surfaces_structural_errors() {
        let two_sinks = r#"[{"id":"Q1","question":"a","dependencies":[]},{"id":"Q2","question":"b","dependencies":[]}]"#;
        let r = roles(vec![ScriptedRule::substring(RoleId::GraphBuilder, "Question: ", two_sinks)]);
        assert!(matches!(
            r.run_graph_builder("a and b?", GraphMode::Strict),
            Err(RoleError::Graph(GraphError::MultipleSinks(_)))
        ));
        assert_eq!(r.run_graph_builder("a and b?", GraphMode::Lenient).unwrap().graph.len(), 3);
    }

    #[test]
    fn judge_replies() {
        let memory = AnswerMemory::new();
        let r = roles(vec![
            ScriptedRule::substring(RoleId::RetrievalJudge, "Question: A?", "Yes"),
            ScriptedRule::substring(RoleId::RetrievalJudge, "Question: B?", "no, retrieval needed"),
            ScriptedRule::substring(RoleId::RetrievalJudge, "Question: C?", "maybe"),
        ]);
        let (a, _) = r.run_judge("A?", &memory).unwrap();
        assert!(a.answerable_directly && !a.unparsed);
        let (b, _) = r.run_judge("B?", &memory).unwrap();
        assert!(!b.answerable_directly && !b.unparsed);
        let (c, _) = r.run_judge("C?", &memory).unwrap();
        assert!(!c.answerable_directly && c.unparsed);
    }

    #[test]
    fn judge_sees_summaries_when_enabled() {
        let mut memory = AnswerMemory::new();
        memory
            .put(MemoryEntry::retrieved(NodeId::new(1).unwrap(), "q", "a", Some("the summary".into())))
            .unwrap();
        let (mut r, rec) = recording("Yes");
        r.run_judge("x", &memory).unwrap();
        r.judge_sees_summaries = false;
        r.run_judge("x", &memory).unwrap();
        let seen = rec.seen.lock().unwrap();
        assert!(input_section(&seen[0]).contains("the summary"));
        assert!(!input_section(&seen[1]).contains("the summary"));
    }

    #[test]
    fn sub_answer_prompt_structure() {
        let r = roles(vec![ScriptedRule::substring(RoleId::SubAnswer, "capital of France", " Paris \n")]);
        let (answer, call) = r.run_sub_answer("What is the capital of France?", None).unwrap();
        assert_eq!(answer, "Paris");
        assert!(!call.payload.contains("[Passage"));

        let (r2, rec) = recording("x");
        r2.run_sub_answer("q?", None).unwrap();
        let ps = [passage("a", "alpha text"), passage("b", "beta text")];
        r2.run_sub_answer("q?", Some(&ps)).unwrap();
        let seen = rec.seen.lock().unwrap();
        assert!(!input_section(&seen[0]).contains("[Passage"));
        let with = input_section(&seen[1]);
        assert_eq!(with.matches("[Passage ").count(), 2);
        assert!(with.find("[Passage 1] Title a").unwrap() < with.find("[Passage 2] Title b").unwrap());
    }

    #[test]
    fn summarizer_paths() {
        let ps = [passage("a", "first passage text"), passage("b", "second")];
        let r = roles(vec![ScriptedRule::substring(RoleId::Summarizer, "Question: Q?", "a short summary")]);
        let (s, call) = r.run_summarizer("Q?", &ps, false).unwrap().unwrap();
        assert_eq!(s, "a short summary");
        assert_eq!(call.unwrap().accounted_in, 4);
        let (s, call) = r.run_summarizer("Q?", &ps, true).unwrap().unwrap();
        assert_eq!(s, "first passage text");
        assert!(call.is_none());
        assert!(r.run_summarizer("Q?", &[], false).unwrap().is_none());
    }

    #[test]
    fn new_query_parsing() {
        assert_eq!(parse_new_query("None"), NewQueryOutcome::Terminate);
        assert_eq!(parse_new_query("  none. "), NewQueryOutcome::Terminate);
        assert_eq!(parse_new_query("\"NONE\""), NewQueryOutcome::Terminate);
        assert_eq!(parse_new_query(""), NewQueryOutcome::Terminate);
        assert_eq!(
            parse_new_query("what year was X founded?\nextra"),
            NewQueryOutcome::NewQuery("what year was X founded?".into())
        );
        let r = roles(vec![ScriptedRule::substring(RoleId::NewQuery, "User question", "None")]);
        assert_eq!(r.run_new_query("o", &AnswerMemory::new()).unwrap().0, NewQueryOutcome::Terminate);
    }

    #[test]
    fn reasoner_examples() {
        let (r, rec) = recording(" final ");
        let (a, _) = r.run_reasoner("o?", &AnswerMemory::new()).unwrap();
        assert_eq!(a, "final");
        let (b, _) = r.run_reasoner("o?", &AnswerMemory::new()).unwrap();
        assert_eq!(a, b);
        let seen = rec.seen.lock().unwrap();
        assert!(input_section(&seen[0]).contains(EMPTY_MEMORY_SENTINEL));
        assert_eq!(seen[0], seen[1]);
    }

    #[test]
    fn gateway_errors_surface() {
        let r = roles(vec![]);
        assert!(matches!(
            r.run_reasoner("o", &AnswerMemory::new()),
            Err(RoleError::Gateway(GatewayError::NoScriptMatch { .. }))
        ));
    }

    proptest! {
        #[test]
        fn judge_parse_is_total(raw in ".{0,40}") {
            let d = parse_judgment(&raw);
            prop_assert!(!(d.answerable_directly && d.unparsed));
            prop_assert_eq!(d.raw, raw);
        }

        #[test]
        fn prompt_assembly_is_pure(q in "[a-zA-Z ?]{0,30}") {
            let r = roles(vec![]);
            for role in RoleId::ALL {
                let inputs = prompts::declared_inputs(role).iter().map(|k| (*k, q.clone())).collect();
                prop_assert_eq!(r.prompt(role, &inputs), r.prompt(role, &inputs));
            }
        }
    }
}
