//! Query graphs: the dependency DAG of sub-queries produced by the graph
//! builder role.
//!
//! A node's template may reference the answers of its parents through
//! placeholders of the form `{Q<k>.answer}`. The builder emits the graph as a
//! JSON array of `{id, question, dependencies}` objects; [`parse_graph`]
//! normalizes and validates that payload and [`QueryGraph::to_payload`]
//! writes it back out in the same shape.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::memory::AnswerMemory;

static PLACEHOLDER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\{Q([0-9]+)\.answer\}").expect("placeholder regex is valid"));

// Braced or bare mention; the bare form is rewritten to the braced one.
static LENIENT_PLACEHOLDER_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"\{Q([0-9]+)\.answer\}|\bQ([0-9]+)\.answer\b").expect("lenient regex is valid")
});

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("malformed graph payload: {0}")]
    MalformedPayload(String),
    #[error("duplicate node id {0}")]
    DuplicateId(NodeId),
    #[error("node {node} depends on unknown node {parent}")]
    UnknownParent { node: NodeId, parent: NodeId },
    #[error("dependency cycle through {0}")]
    CycleDetected(NodeId),
    #[error("graph has {} sinks ({}) but strict mode requires exactly one", .0.len(), join_ids(.0))]
    MultipleSinks(Vec<NodeId>),
    #[error("node {node} references {referenced}.answer but does not depend on it")]
    DanglingPlaceholder { node: NodeId, referenced: NodeId },
    #[error("sub-query {node} needs the answer of {missing}, which is not resolved yet")]
    UnresolvedDependency { node: NodeId, missing: NodeId },
}

fn join_ids(ids: &[NodeId]) -> String {
    ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(", ")
}

/// Identifier of a sub-query node, rendered as `Q<k>` with `k >= 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(u32);

impl NodeId {
    pub fn new(index: u32) -> Option<Self> {
        (index >= 1).then_some(Self(index))
    }

    pub fn index(self) -> u32 {
        self.0
    }

    /// The canonical placeholder naming this node's answer.
    pub fn placeholder(self) -> String {
        format!("{{Q{}.answer}}", self.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

impl FromStr for NodeId {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s
            .trim()
            .strip_prefix('Q')
            .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
            .ok_or_else(|| GraphError::MalformedPayload(format!("invalid node id {s:?}")))?;
        digits
            .parse::<u32>()
            .ok()
            .and_then(NodeId::new)
            .ok_or_else(|| GraphError::MalformedPayload(format!("invalid node id {s:?}")))
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// A reference to a parent's answer inside a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placeholder {
    pub node_id: NodeId,
}

impl fmt::Display for Placeholder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.node_id.placeholder())
    }
}

/// Canonical placeholders appearing in `template`, in order of appearance.
pub fn placeholders(template: &str) -> Vec<Placeholder> {
    PLACEHOLDER_RE
        .captures_iter(template)
        .filter_map(|c| c[1].parse::<u32>().ok().and_then(NodeId::new))
        .map(|node_id| Placeholder { node_id })
        .collect()
}

/// Rewrites bare `Qk.answer` mentions to the braced `{Qk.answer}` form.
pub fn normalize_placeholders(template: &str) -> String {
    LENIENT_PLACEHOLDER_RE
        .replace_all(template, |c: &regex::Captures<'_>| match c.get(2) {
            Some(bare) => format!("{{Q{}.answer}}", bare.as_str()),
            None => c[0].to_string(),
        })
        .into_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryNode {
    pub id: NodeId,
    pub template: String,
    pub parents: Vec<NodeId>,
}

impl QueryNode {
    pub fn placeholders(&self) -> Vec<Placeholder> {
        placeholders(&self.template)
    }
}

/// How strictly builder output is validated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GraphMode {
    /// Exactly one sink is required.
    Strict,
    /// Several sinks are joined under a synthesized final node carrying the
    /// original query.
    #[default]
    Lenient,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryGraph {
    pub origin: String,
    pub nodes: Vec<QueryNode>,
    pub final_id: NodeId,
    /// Nodes appended by the new-query role after the initial plan.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub refinements: BTreeSet<NodeId>,
}

#[derive(Serialize, Deserialize)]
struct WireNode {
    id: String,
    question: String,
    #[serde(default)]
    dependencies: Vec<String>,
}

/// Parses and validates the graph builder's output.
///
/// The payload is the first JSON array found in `text`, so code fences or a
/// short preamble around it are tolerated.
pub fn parse_graph(text: &str, origin: &str, mode: GraphMode) -> Result<QueryGraph, GraphError> {
    let array = extract_json_array(text)
        .ok_or_else(|| GraphError::MalformedPayload("no JSON array found".into()))?;
    let wire: Vec<WireNode> =
        serde_json::from_str(array).map_err(|e| GraphError::MalformedPayload(e.to_string()))?;
    if wire.is_empty() {
        return Err(GraphError::MalformedPayload("graph has no nodes".into()));
    }

    let mut nodes = Vec::with_capacity(wire.len());
    for w in wire {
        let id: NodeId = w.id.parse()?;
        let mut parents = Vec::with_capacity(w.dependencies.len());
        for dep in &w.dependencies {
            let parent: NodeId = dep.parse()?;
            if !parents.contains(&parent) {
                parents.push(parent);
            }
        }
        nodes.push(QueryNode {
            id,
            template: normalize_placeholders(w.question.trim()),
            parents,
        });
    }
    QueryGraph::from_nodes(origin, nodes, mode)
}

fn extract_json_array(text: &str) -> Option<&str> {
    let start = text.find('[')?;
    let end = text.rfind(']')?;
    (end > start).then(|| &text[start..=end])
}

impl QueryGraph {
    /// Validates `nodes` and determines the final node.
    pub fn from_nodes(
        origin: &str,
        mut nodes: Vec<QueryNode>,
        mode: GraphMode,
    ) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::MalformedPayload("graph has no nodes".into()));
        }
        let mut seen = HashSet::new();
        for node in &nodes {
            if !seen.insert(node.id) {
                return Err(GraphError::DuplicateId(node.id));
            }
        }
        for node in &nodes {
            for &parent in &node.parents {
                if !seen.contains(&parent) {
                    return Err(GraphError::UnknownParent {
                        node: node.id,
                        parent,
                    });
                }
            }
            for p in node.placeholders() {
                if !node.parents.contains(&p.node_id) {
                    return Err(GraphError::DanglingPlaceholder {
                        node: node.id,
                        referenced: p.node_id,
                    });
                }
            }
        }
        kahn_order(&nodes)?;

        let sinks = sinks_of(&nodes);
        let final_id = match sinks.as_slice() {
            [only] => *only,
            _ if mode == GraphMode::Strict => return Err(GraphError::MultipleSinks(sinks)),
            _ => {
                let id = next_id(&nodes);
                nodes.push(QueryNode {
                    id,
                    template: origin.to_string(),
                    parents: sinks,
                });
                id
            }
        };
        Ok(Self {
            origin: origin.to_string(),
            nodes,
            final_id,
            refinements: BTreeSet::new(),
        })
    }

    pub fn node(&self, id: NodeId) -> Option<&QueryNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn sinks(&self) -> Vec<NodeId> {
        sinks_of(&self.nodes)
    }

    pub fn is_refinement(&self, id: NodeId) -> bool {
        self.refinements.contains(&id)
    }

    /// Node ids such that every node follows all of its parents. Ties are
    /// broken by ascending numeric id.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        kahn_order(&self.nodes)
    }

    /// Groups nodes into dependency tiers: tier 0 has no parents and every
    /// node sits one tier below its deepest parent. Each tier is sorted by id.
    pub fn tiers(&self) -> Result<Vec<Vec<NodeId>>, GraphError> {
        let order = self.topological_order()?;
        let by_id: HashMap<NodeId, &QueryNode> = self.nodes.iter().map(|n| (n.id, n)).collect();
        let mut depth: HashMap<NodeId, usize> = HashMap::new();
        let mut tiers: Vec<Vec<NodeId>> = Vec::new();
        for id in order {
            let d = by_id[&id]
                .parents
                .iter()
                .map(|p| depth[p] + 1)
                .max()
                .unwrap_or(0);
            depth.insert(id, d);
            if tiers.len() <= d {
                tiers.resize_with(d + 1, Vec::new);
            }
            tiers[d].push(id);
        }
        for tier in &mut tiers {
            tier.sort();
        }
        Ok(tiers)
    }

    /// Appends a refinement node holding `question` as a child of the final
    /// node. The final node designation is unchanged.
    pub fn attach_new_node(&self, question: &str) -> QueryGraph {
        let mut next = self.clone();
        let id = next_id(&next.nodes);
        next.nodes.push(QueryNode {
            id,
            template: question.trim().to_string(),
            parents: vec![self.final_id],
        });
        next.refinements.insert(id);
        next
    }

    /// Builder payload for this graph: `[{id, question, dependencies}, ...]`.
    pub fn to_payload(&self) -> String {
        let wire: Vec<WireNode> = self
            .nodes
            .iter()
            .map(|n| WireNode {
                id: n.id.to_string(),
                question: n.template.clone(),
                dependencies: n.parents.iter().map(|p| p.to_string()).collect(),
            })
            .collect();
        serde_json::to_string_pretty(&wire).expect("wire nodes always serialize")
    }
}

/// The degenerate plan used when decomposition is disabled or fails.
pub fn single_node_graph(origin: &str) -> QueryGraph {
    let id = NodeId(1);
    QueryGraph {
        origin: origin.to_string(),
        nodes: vec![QueryNode {
            id,
            template: origin.to_string(),
            parents: Vec::new(),
        }],
        final_id: id,
        refinements: BTreeSet::new(),
    }
}

/// Replaces each placeholder in `node` with the parent's stored answer.
pub fn substitute(node: &QueryNode, memory: &AnswerMemory) -> Result<String, GraphError> {
    for &parent in &node.parents {
        if memory.lookup_answer(parent).is_err() {
            return Err(GraphError::UnresolvedDependency {
                node: node.id,
                missing: parent,
            });
        }
    }
    let mut out = String::with_capacity(node.template.len());
    let mut last = 0;
    for caps in PLACEHOLDER_RE.captures_iter(&node.template) {
        let whole = caps.get(0).expect("group 0 always present");
        let Some(id) = caps[1].parse::<u32>().ok().and_then(NodeId::new) else {
            continue;
        };
        let answer = memory
            .lookup_answer(id)
            .map_err(|_| GraphError::UnresolvedDependency {
                node: node.id,
                missing: id,
            })?;
        out.push_str(&node.template[last..whole.start()]);
        out.push_str(answer);
        last = whole.end();
    }
    out.push_str(&node.template[last..]);
    Ok(out)
}

fn next_id(nodes: &[QueryNode]) -> NodeId {
    NodeId(nodes.iter().map(|n| n.id.0).max().unwrap_or(0) + 1)
}

fn sinks_of(nodes: &[QueryNode]) -> Vec<NodeId> {
    let referenced: HashSet<NodeId> = nodes.iter().flat_map(|n| n.parents.iter().copied()).collect();
    let mut sinks: Vec<NodeId> = nodes
        .iter()
        .map(|n| n.id)
        .filter(|id| !referenced.contains(id))
        .collect();
    sinks.sort();
    sinks
}

fn kahn_order(nodes: &[QueryNode]) -> Result<Vec<NodeId>, GraphError> {
    let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut children: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for node in nodes {
        indegree.insert(node.id, node.parents.len());
        for &p in &node.parents {
            children.entry(p).or_default().push(node.id);
        }
    }
    let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
        .iter()
        .filter(|(_, &d)| d == 0)
        .map(|(&id, _)| Reverse(id))
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(Reverse(id)) = ready.pop() {
        order.push(id);
        for child in children.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(child).expect("child is a known node");
            *d -= 1;
            if *d == 0 {
                ready.push(Reverse(*child));
            }
        }
    }
    if order.len() < nodes.len() {
        let stuck = indegree
            .iter()
            .find(|(_, &d)| d > 0)
            .map(|(&id, _)| id)
            .expect("some node keeps a nonzero indegree");
        return Err(GraphError::CycleDetected(stuck));
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MemoryEntry;

    fn q(k: u32) -> NodeId {
        NodeId::new(k).unwrap()
    }

    const FIGURE_PAYLOAD: &str = r#"[
        {"id": "Q1", "question": "Who directed Inception?", "dependencies": []},
        {"id": "Q2", "question": "Who directed Interstellar?", "dependencies": []},
        {"id": "Q3", "question": "Are Q1.answer and {Q2.answer} the same person?", "dependencies": ["Q1", "Q2"]}
    ]"#;

    #[test]
    fn two_node_chain() {
        let text = r#"[{"id":"Q1","question":"who founded X","dependencies":[]},
                       {"id":"Q2","question":"when did {Q1.answer} die","dependencies":["Q1"]}]"#;
        let g = parse_graph(text, "when did the founder of X die", GraphMode::Strict).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.final_id, q(2));
    }

    #[test]
    fn smallest_cycle_rejected() {
        let text = r#"[{"id":"Q1","question":"a {Q2.answer}","dependencies":["Q2"]},
                       {"id":"Q2","question":"b {Q1.answer}","dependencies":["Q1"]}]"#;
        assert!(matches!(
            parse_graph(text, "x", GraphMode::Lenient),
            Err(GraphError::CycleDetected(_))
        ));
    }

    #[test]
    fn self_dependency_is_a_cycle() {
        let text = r#"[{"id":"Q1","question":"a","dependencies":["Q1"]}]"#;
        assert_eq!(
            parse_graph(text, "x", GraphMode::Lenient),
            Err(GraphError::CycleDetected(q(1)))
        );
    }

    #[test]
    fn figure_style_graph_normalizes_bare_placeholders() {
        let g = parse_graph(FIGURE_PAYLOAD, "origin", GraphMode::Strict).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g.final_id, q(3));
        assert_eq!(g.sinks(), vec![q(3)]);
        assert_eq!(
            g.node(q(3)).unwrap().template,
            "Are {Q1.answer} and {Q2.answer} the same person?"
        );
    }

    #[test]
    fn fenced_payload_is_accepted() {
        let text = format!("Here is the plan:\n```json\n{FIGURE_PAYLOAD}\n```");
        assert_eq!(parse_graph(&text, "o", GraphMode::Strict).unwrap().len(), 3);
    }

    #[test]
    fn payload_errors() {
        assert!(matches!(
            parse_graph("not json", "o", GraphMode::Lenient),
            Err(GraphError::MalformedPayload(_))
        ));
        assert!(matches!(
            parse_graph("[]", "o", GraphMode::Lenient),
            Err(GraphError::MalformedPayload(_))
        ));
        let bad_id = r#"[{"id":"Q0","question":"a","dependencies":[]}]"#;
        assert!(matches!(
            parse_graph(bad_id, "o", GraphMode::Lenient),
            Err(GraphError::MalformedPayload(_))
        ));
        let dup = r#"[{"id":"Q1","question":"a","dependencies":[]},{"id":"Q1","question":"b","dependencies":[]}]"#;
        assert_eq!(
            parse_graph(dup, "o", GraphMode::Lenient),
            Err(GraphError::DuplicateId(q(1)))
        );
        let unknown = r#"[{"id":"Q1","question":"a","dependencies":["Q7"]}]"#;
        assert_eq!(
            parse_graph(unknown, "o", GraphMode::Lenient),
            Err(GraphError::UnknownParent {
                node: q(1),
                parent: q(7)
            })
        );
        let dangling = r#"[{"id":"Q1","question":"a","dependencies":[]},{"id":"Q2","question":"b {Q1.answer}","dependencies":[]}]"#;
        assert_eq!(
            parse_graph(dangling, "o", GraphMode::Lenient),
            Err(GraphError::DanglingPlaceholder {
                node: q(2),
                referenced: q(1)
            })
        );
    }

    #[test]
    fn multiple_sinks_strict_vs_lenient() {
        let text = r#"[{"id":"Q1","question":"a","dependencies":[]},{"id":"Q2","question":"b","dependencies":[]}]"#;
        assert_eq!(
            parse_graph(text, "origin?", GraphMode::Strict),
            Err(GraphError::MultipleSinks(vec![q(1), q(2)]))
        );
        let g = parse_graph(text, "origin?", GraphMode::Lenient).unwrap();
        assert_eq!(g.final_id, q(3));
        let synthesized = g.node(q(3)).unwrap();
        assert_eq!(synthesized.template, "origin?");
        assert_eq!(synthesized.parents, vec![q(1), q(2)]);
    }

    #[test]
    fn topological_order_examples() {
        let chain = QueryGraph::from_nodes(
            "o",
            vec![
                QueryNode { id: q(3), template: "c".into(), parents: vec![q(2)] },
                QueryNode { id: q(2), template: "b".into(), parents: vec![q(1)] },
                QueryNode { id: q(1), template: "a".into(), parents: vec![] },
            ],
            GraphMode::Strict,
        )
        .unwrap();
        assert_eq!(chain.topological_order().unwrap(), vec![q(1), q(2), q(3)]);

        let diamond = QueryGraph::from_nodes(
            "o",
            vec![
                QueryNode { id: q(1), template: "a".into(), parents: vec![] },
                QueryNode { id: q(3), template: "c".into(), parents: vec![q(1)] },
                QueryNode { id: q(2), template: "b".into(), parents: vec![q(1)] },
                QueryNode { id: q(4), template: "d".into(), parents: vec![q(2), q(3)] },
            ],
            GraphMode::Strict,
        )
        .unwrap();
        assert_eq!(diamond.topological_order().unwrap(), vec![q(1), q(2), q(3), q(4)]);
        assert_eq!(
            diamond.tiers().unwrap(),
            vec![vec![q(1)], vec![q(2), q(3)], vec![q(4)]]
        );
    }

    fn memory_with(answers: &[(u32, &str)]) -> AnswerMemory {
        let mut m = AnswerMemory::new();
        for &(k, a) in answers {
            m.put(MemoryEntry::direct(q(k), format!("question {k}"), a)).unwrap();
        }
        m
    }

    #[test]
    fn substitute_examples() {
        let node = QueryNode {
            id: q(2),
            template: "capital of {Q1.answer}?".into(),
            parents: vec![q(1)],
        };
        assert_eq!(
            substitute(&node, &memory_with(&[(1, "France")])).unwrap(),
            "capital of France?"
        );

        let plain = QueryNode { id: q(1), template: "who is {X}?".into(), parents: vec![] };
        assert_eq!(substitute(&plain, &AnswerMemory::new()).unwrap(), "who is {X}?");

        let two = QueryNode {
            id: q(3),
            template: "{Q1.answer} vs {Q2.answer}".into(),
            parents: vec![q(1), q(2)],
        };
        assert_eq!(
            substitute(&two, &memory_with(&[(1, "a")])),
            Err(GraphError::UnresolvedDependency { node: q(3), missing: q(2) })
        );
    }

    #[test]
    fn attach_allocates_monotone_ids() {
        let g = parse_graph(FIGURE_PAYLOAD, "o", GraphMode::Strict).unwrap();
        let g4 = g.attach_new_node("what year was X founded?");
        let added = g4.node(q(4)).unwrap();
        assert_eq!(added.parents, vec![q(3)]);
        assert!(g4.is_refinement(q(4)));
        let g5 = g4.attach_new_node("another?");
        assert_eq!(g5.node(q(5)).unwrap().parents, vec![q(3)]);
        assert_eq!(g5.topological_order().unwrap().len(), 5);

        let single = single_node_graph("who is X?").attach_new_node("more?");
        assert_eq!(single.node(q(2)).unwrap().parents, vec![q(1)]);
    }

    #[test]
    fn single_node_graph_passes_origin_through() {
        let g = single_node_graph("who is X?");
        assert_eq!(g.final_id, q(1));
        assert_eq!(g.node(q(1)).unwrap().template, "who is X?");
        assert_eq!(g.topological_order().unwrap(), vec![q(1)]);
        assert_eq!(single_node_graph("").node(q(1)).unwrap().template, "");
    }

    #[test]
    fn payload_round_trip() {
        let g = parse_graph(FIGURE_PAYLOAD, "o", GraphMode::Strict).unwrap();
        let again = parse_graph(&g.to_payload(), "o", GraphMode::Strict).unwrap();
        assert_eq!(g, again);
        let keys: Vec<&str> = ["\"id\"", "\"question\"", "\"dependencies\""].to_vec();
        let payload = g.to_payload();
        let positions: Vec<usize> = keys.iter().map(|k| payload.find(k).unwrap()).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
    }
}
