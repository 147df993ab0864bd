//! The three-stage pipeline: build the query graph, resolve every sub-query
//! (judge, optional retrieval, sub-answer, summary), then refine with new
//! queries and reason out the final answer.
//!
//! Nodes of the same dependency tier may be resolved concurrently. All of
//! them read the memory as it stood when the tier started, and their entries
//! are written back in id order, so results do not depend on the width.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::QAItem;
use crate::gateway::RoleId;
use crate::graph::{single_node_graph, substitute, GraphError, GraphMode, NodeId, QueryGraph, QueryNode};
use crate::memory::{AnswerMemory, MemoryEntry, MemoryError};
use crate::retrieval::{Passage, RetrievalError, Retriever};
use crate::roles::{NewQueryOutcome, RoleCall, RoleError, Roles};

/// Stored as the answer when the sub-answer role replies with nothing.
pub const EMPTY_ANSWER_PLACEHOLDER: &str = "unknown";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_graph: bool,
    pub no_judge: bool,
    pub no_summarizer: bool,
    pub no_new_query: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub top_k: usize,
    pub max_new_queries: usize,
    pub ablations: Ablations,
    /// How many same-tier nodes may be resolved at once.
    pub width: usize,
    pub graph_mode: GraphMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            max_new_queries: 3,
            ablations: Ablations::default(),
            width: 1,
            graph_mode: GraphMode::Lenient,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        if self.width == 0 {
            return Err("width must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTally {
    pub calls: usize,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub accounted_in: usize,
    pub accounted_out: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Telemetry {
    /// Nodes of the initial plan.
    pub sub_query_count: usize,
    /// Sub-queries that reached the retrieval decision (judged, or forced to
    /// retrieve when the judge is disabled).
    pub judged_sub_queries: usize,
    pub retrieval_calls: usize,
    pub retrievals_skipped: usize,
    pub passages_fetched: usize,
    pub new_query_calls: usize,
    pub new_queries_added: usize,
    pub empty_retrievals: usize,
    pub unparsed_judgments: usize,
    pub empty_answers: usize,
    pub builder_retried: bool,
    pub builder_fallback: bool,
    pub tokens: BTreeMap<RoleId, RoleTally>,
}

impl Telemetry {
    /// Share of judged sub-queries that skipped retrieval.
    pub fn saved_retrieval_ratio(&self) -> f64 {
        if self.judged_sub_queries == 0 {
            0.0
        } else {
            self.retrievals_skipped as f64 / self.judged_sub_queries as f64
        }
    }

    fn record_calls(&mut self, calls: &[RoleCall]) {
        for role in RoleId::ALL {
            self.tokens.entry(role).or_default();
        }
        for call in calls {
            let t = self.tokens.entry(call.role).or_default();
            t.calls += 1;
            t.prompt_tokens += call.prompt_tokens;
            t.output_tokens += call.output_tokens;
            t.accounted_in += call.accounted_in;
            t.accounted_out += call.accounted_out;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalDecision {
    Direct,
    Retrieve,
    /// Judge output was unrecognized; retrieval is the default.
    RetrieveUnparsed,
    /// The judge is disabled, so every sub-query retrieves.
    ForcedRetrieve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEvent {
    pub node_id: NodeId,
    pub question: String,
    pub decision: RetrievalDecision,
    pub passage_ids: Vec<String>,
    pub answer: String,
    pub summary: Option<String>,
    pub refinement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_id: Option<String>,
    pub query: String,
    pub graph: QueryGraph,
    pub events: Vec<NodeEvent>,
    pub memory: AnswerMemory,
    pub final_answer: String,
    pub telemetry: Telemetry,
    /// Every role invocation in call order.
    pub calls: Vec<RoleCall>,
}

impl RunResult {
    /// The run trace as pretty JSON with a fixed field order.
    pub fn to_trace_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run results always serialize")
    }

    pub fn from_trace_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GraphBuilding,
    SubQueryExecution,
    Refinement,
    Reasoning,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::GraphBuilding => "graph building",
            Stage::SubQueryExecution => "sub-query execution",
            Stage::Refinement => "refinement",
            Stage::Reasoning => "reasoning",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Failure {
    #[error(transparent)]
    Role(#[from] RoleError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error("invalid pipeline config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{stage} failed{}: {source}", .node.map(|n| format!(" at {n}")).unwrap_or_default())]
pub struct PipelineError {
    pub stage: Stage,
    pub node: Option<NodeId>,
    pub source: Failure,
    /// Memory as it stood when the run failed.
    pub partial_memory: Box<AnswerMemory>,
}

struct Resolution {
    entry: MemoryEntry,
    event: NodeEvent,
    calls: Vec<RoleCall>,
    passages: usize,
}

pub struct Pipeline {
    roles: Roles,
    retriever: Arc<dyn Retriever>,
}

impl Pipeline {
    pub fn new(roles: Roles, retriever: Arc<dyn Retriever>) -> Self {
        Self { roles, retriever }
    }

    pub fn roles(&self) -> &Roles {
        &self.roles
    }

    fn resolve_node(
        &self,
        node: &QueryNode,
        memory: &AnswerMemory,
        config: &PipelineConfig,
        refinement: bool,
    ) -> Result<Resolution, Failure> {
        let question = substitute(node, memory)?;
        let mut calls = Vec::new();

        let decision = if config.ablations.no_judge {
            RetrievalDecision::ForcedRetrieve
        } else {
            let (judgment, call) = self.roles.run_judge(&question, memory)?;
            calls.push(call);
            match (judgment.answerable_directly, judgment.unparsed) {
                (true, _) => RetrievalDecision::Direct,
                (false, false) => RetrievalDecision::Retrieve,
                (false, true) => RetrievalDecision::RetrieveUnparsed,
            }
        };

        let passages: Option<Vec<Passage>> = match decision {
            RetrievalDecision::Direct => None,
            _ => Some(self.retriever.search(&question, config.top_k)?),
        };
        let usable = passages.as_deref().filter(|p| !p.is_empty());

        let (mut answer, call) = self.roles.run_sub_answer(&question, usable)?;
        calls.push(call);
        if answer.is_empty() {
            answer = EMPTY_ANSWER_PLACEHOLDER.to_string();
        }

        let summary = match usable {
            Some(ps) => {
                let out = self.roles.run_summarizer(&question, ps, config.ablations.no_summarizer)?;
                out.map(|(summary, call)| {
                    calls.extend(call);
                    summary
                })
            }
            None => None,
        };

        let mut entry = match &passages {
            None => MemoryEntry::direct(node.id, question.clone(), answer.clone()),
            Some(_) => MemoryEntry::retrieved(node.id, question.clone(), answer.clone(), summary.clone()),
        };
        entry.added_by_refinement = refinement;
        let event = NodeEvent {
            node_id: node.id,
            question,
            decision,
            passage_ids: passages.iter().flatten().map(|p| p.id.clone()).collect(),
            answer,
            summary,
            refinement,
        };
        Ok(Resolution { entry, event, calls, passages: passages.map_or(0, |p| p.len()) })
    }

    fn resolve_tier(
        &self,
        graph: &QueryGraph,
        tier: &[NodeId],
        memory: &AnswerMemory,
        config: &PipelineConfig,
    ) -> Vec<(NodeId, Result<Resolution, Failure>)> {
        let nodes: Vec<&QueryNode> = tier.iter().map(|id| graph.node(*id).expect("tier ids come from the graph")).collect();
        if config.width <= 1 || nodes.len() <= 1 {
            return nodes
                .into_iter()
                .map(|n| (n.id, self.resolve_node(n, memory, config, false)))
                .collect();
        }
        let mut out = Vec::with_capacity(nodes.len());
        for chunk in nodes.chunks(config.width) {
            thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|n| (n.id, scope.spawn(move || self.resolve_node(n, memory, config, false))))
                    .collect();
                for (id, h) in handles {
                    out.push((id, h.join().expect("node resolution panicked")));
                }
            });
        }
        out
    }

    /// Runs all three stages for one query.
    pub fn run(&self, query: &str, config: &PipelineConfig) -> Result<RunResult, PipelineError> {
        let mut memory = AnswerMemory::new();
        let fail = |stage, node, source: Failure, memory: &AnswerMemory| PipelineError {
            stage,
            node,
            source,
            partial_memory: Box::new(memory.clone()),
        };
        config
            .validate()
            .map_err(|e| fail(Stage::GraphBuilding, None, Failure::Config(e), &memory))?;

        let mut roles_calls: Vec<RoleCall> = Vec::new();
        let mut telemetry = Telemetry::default();
        let mut events = Vec::new();

        let mut graph = if config.ablations.no_graph {
            single_node_graph(query)
        } else {
            let outcome = self
                .roles
                .run_graph_builder(query, config.graph_mode)
                .map_err(|e| fail(Stage::GraphBuilding, None, e.into(), &memory))?;
            telemetry.builder_retried = outcome.retried;
            telemetry.builder_fallback = outcome.fallback;
            roles_calls.extend(outcome.calls);
            outcome.graph
        };
        telemetry.sub_query_count = graph.len();

        let absorb = |resolution: Resolution,
                          memory: &mut AnswerMemory,
                          telemetry: &mut Telemetry,
                          events: &mut Vec<NodeEvent>,
                          calls: &mut Vec<RoleCall>|
         -> Result<(), MemoryError> {
            telemetry.judged_sub_queries += 1;
            match resolution.event.decision {
                RetrievalDecision::Direct => telemetry.retrievals_skipped += 1,
                RetrievalDecision::RetrieveUnparsed => {
                    telemetry.unparsed_judgments += 1;
                    telemetry.retrieval_calls += 1;
                }
                _ => telemetry.retrieval_calls += 1,
            }
            if resolution.event.decision != RetrievalDecision::Direct && resolution.passages == 0 {
                telemetry.empty_retrievals += 1;
            }
            if resolution.entry.answer == EMPTY_ANSWER_PLACEHOLDER {
                telemetry.empty_answers += 1;
            }
            telemetry.passages_fetched += resolution.passages;
            memory.put(resolution.entry)?;
            events.push(resolution.event);
            calls.extend(resolution.calls);
            Ok(())
        };

        let tiers = graph
            .tiers()
            .map_err(|e| fail(Stage::SubQueryExecution, None, e.into(), &memory))?;
        for tier in &tiers {
            let snapshot = memory.clone();
            for (id, result) in self.resolve_tier(&graph, tier, &snapshot, config) {
                let resolution = result.map_err(|e| fail(Stage::SubQueryExecution, Some(id), e, &memory))?;
                absorb(resolution, &mut memory, &mut telemetry, &mut events, &mut roles_calls)
                    .map_err(|e| fail(Stage::SubQueryExecution, Some(id), e.into(), &memory))?;
            }
        }

        if !config.ablations.no_new_query {
            for _ in 0..config.max_new_queries {
                let (outcome, call) = self
                    .roles
                    .run_new_query(query, &memory)
                    .map_err(|e| fail(Stage::Refinement, None, e.into(), &memory))?;
                roles_calls.push(call);
                telemetry.new_query_calls += 1;
                let NewQueryOutcome::NewQuery(question) = outcome else { break };
                graph = graph.attach_new_node(&question);
                let node = graph.nodes.last().expect("node was just attached").clone();
                let resolution = self
                    .resolve_node(&node, &memory, config, true)
                    .map_err(|e| fail(Stage::Refinement, Some(node.id), e, &memory))?;
                absorb(resolution, &mut memory, &mut telemetry, &mut events, &mut roles_calls)
                    .map_err(|e| fail(Stage::Refinement, Some(node.id), e.into(), &memory))?;
                telemetry.new_queries_added += 1;
            }
        }

        let (final_answer, call) = self
            .roles
            .run_reasoner(query, &memory)
            .map_err(|e| fail(Stage::Reasoning, None, e.into(), &memory))?;
        roles_calls.push(call);
        telemetry.record_calls(&roles_calls);

        Ok(RunResult {
            item_id: None,
            query: query.to_string(),
            graph,
            events,
            memory,
            final_answer,
            telemetry,
            calls: roles_calls,
        })
    }

    /// Runs every item, `parallel` at a time. Failures are recorded and the
    /// batch continues unless `strict` is set, in which case the first
    /// failure (in dataset order) is returned.
    pub fn run_batch(
        &self,
        items: &[QAItem],
        config: &PipelineConfig,
        parallel: usize,
        strict: bool,
    ) -> Result<BatchReport, BatchError> {
        let slots: Mutex<Vec<Option<Result<RunResult, PipelineError>>>> = Mutex::new(vec![None; items.len()]);
        let next = AtomicUsize::new(0);
        let worker = || loop {
            let i = next.fetch_add(1, Ordering::SeqCst);
            let Some(item) = items.get(i) else { break };
            let outcome = self.run(&item.question, config).map(|mut r| {
                r.item_id = Some(item.id.clone());
                r
            });
            slots.lock().expect("result slots poisoned")[i] = Some(outcome);
        };
        thread::scope(|scope| {
            for _ in 0..parallel.max(1).min(items.len().max(1)) {
                scope.spawn(worker);
            }
        });

        let mut outcomes = Vec::with_capacity(items.len());
        for (item, slot) in items.iter().zip(slots.into_inner().expect("result slots poisoned")) {
            match slot.expect("every item was processed") {
                Ok(result) => outcomes.push(ItemOutcome { id: item.id.clone(), result: Some(result), error: None }),
                Err(e) if strict => return Err(BatchError { item_id: item.id.clone(), error: e }),
                Err(e) => outcomes.push(ItemOutcome { id: item.id.clone(), result: None, error: Some(e.to_string()) }),
            }
        }
        let aggregate = BatchAggregate::from_outcomes(&outcomes);
        Ok(BatchReport { outcomes, aggregate })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("item {item_id}: {error}")]
pub struct BatchError {
    pub item_id: String,
    pub error: PipelineError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemOutcome {
    pub id: String,
    pub result: Option<RunResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchAggregate {
    pub items: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub mean_sub_queries: f64,
    /// Passages fetched per successful item.
    pub mean_passages_per_query: f64,
    /// Skipped retrievals over judged sub-queries, pooled across items.
    pub saved_retrieval_ratio: f64,
    /// Share of successful items that added at least one new query.
    pub new_query_item_ratio: f64,
}

impl BatchAggregate {
    pub fn from_outcomes(outcomes: &[ItemOutcome]) -> Self {
        let runs: Vec<&RunResult> = outcomes.iter().filter_map(|o| o.result.as_ref()).collect();
        let n = runs.len();
        let per = |total: usize| if n == 0 { 0.0 } else { total as f64 / n as f64 };
        let judged: usize = runs.iter().map(|r| r.telemetry.judged_sub_queries).sum();
        let skipped: usize = runs.iter().map(|r| r.telemetry.retrievals_skipped).sum();
        Self {
            items: outcomes.len(),
            succeeded: n,
            failed: outcomes.len() - n,
            mean_sub_queries: per(runs.iter().map(|r| r.telemetry.sub_query_count).sum()),
            mean_passages_per_query: per(runs.iter().map(|r| r.telemetry.passages_fetched).sum()),
            saved_retrieval_ratio: if judged == 0 { 0.0 } else { skipped as f64 / judged as f64 },
            new_query_item_ratio: per(runs.iter().filter(|r| r.telemetry.new_queries_added > 0).count()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub outcomes: Vec<ItemOutcome>,
    pub aggregate: BatchAggregate,
}
