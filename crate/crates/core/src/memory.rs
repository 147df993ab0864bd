//! Answer memory: the ordered record of resolved sub-queries that downstream
//! roles read as context.

use indexmap::IndexMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::graph::NodeId;

/// Rendered in place of the record block when nothing has been resolved.
pub const EMPTY_MEMORY_SENTINEL: &str = "(no prior sub-answers)";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("memory already holds an entry for {0}")]
    DuplicateKey(NodeId),
    #[error("no memory entry for {0}")]
    MissingKey(NodeId),
    #[error("entry {0} carries a summary but was not retrieved")]
    SummaryWithoutRetrieval(NodeId),
    #[error("entry {0} has an empty answer")]
    EmptyAnswer(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub node_id: NodeId,
    /// The concrete question after placeholder substitution.
    pub question: String,
    pub answer: String,
    pub summary: Option<String>,
    pub retrieved: bool,
    pub added_by_refinement: bool,
}

impl MemoryEntry {
    /// An entry answered without retrieval.
    pub fn direct(node_id: NodeId, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            node_id,
            question: question.into(),
            answer: answer.into(),
            summary: None,
            retrieved: false,
            added_by_refinement: false,
        }
    }

    pub fn retrieved(
        node_id: NodeId,
        question: impl Into<String>,
        answer: impl Into<String>,
        summary: Option<String>,
    ) -> Self {
        Self {
            node_id,
            question: question.into(),
            answer: answer.into(),
            summary,
            retrieved: true,
            added_by_refinement: false,
        }
    }

    pub fn from_refinement(mut self) -> Self {
        self.added_by_refinement = true;
        self
    }
}

/// Entries keyed by node id, iterated in insertion (resolution) order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerMemory {
    entries: IndexMap<NodeId, MemoryEntry>,
}

impl AnswerMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put(&mut self, entry: MemoryEntry) -> Result<(), MemoryError> {
        if self.entries.contains_key(&entry.node_id) {
            return Err(MemoryError::DuplicateKey(entry.node_id));
        }
        if entry.summary.is_some() && !entry.retrieved {
            return Err(MemoryError::SummaryWithoutRetrieval(entry.node_id));
        }
        if entry.answer.trim().is_empty() {
            return Err(MemoryError::EmptyAnswer(entry.node_id));
        }
        self.entries.insert(entry.node_id, entry);
        Ok(())
    }

    pub fn lookup_answer(&self, node_id: NodeId) -> Result<&str, MemoryError> {
        self.entries
            .get(&node_id)
            .map(|e| e.answer.as_str())
            .ok_or(MemoryError::MissingKey(node_id))
    }

    pub fn get(&self, node_id: NodeId) -> Option<&MemoryEntry> {
        self.entries.get(&node_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Renders the memory as prompt context, one record per entry:
    ///
    /// ```text
    /// [Q1] Question: ...
    /// Answer: ...
    /// Summary: ...
    /// ```
    ///
    /// Records are separated by a blank line. The summary line appears only
    /// when `include_summaries` is set and the entry has one.
    pub fn render_for_prompt(&self, include_summaries: bool) -> String {
        if self.entries.is_empty() {
            return EMPTY_MEMORY_SENTINEL.to_string();
        }
        let mut out = String::new();
        for (i, e) in self.entries.values().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            out.push_str(&format!("[{}] Question: {}\nAnswer: {}", e.node_id, e.question, e.answer));
            if include_summaries {
                if let Some(summary) = &e.summary {
                    out.push_str("\nSummary: ");
                    out.push_str(summary);
                }
            }
        }
        out
    }
}

impl Serialize for AnswerMemory {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_seq(self.entries.values())
    }
}

impl<'de> Deserialize<'de> for AnswerMemory {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let list = Vec::<MemoryEntry>::deserialize(deserializer)?;
        let mut memory = AnswerMemory::new();
        for entry in list {
            memory.put(entry).map_err(serde::de::Error::custom)?;
        }
        Ok(memory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(k: u32) -> NodeId {
        NodeId::new(k).unwrap()
    }

    #[test]
    fn put_and_order() {
        let mut m = AnswerMemory::new();
        m.put(MemoryEntry::direct(q(1), "a?", "A")).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(
            m.put(MemoryEntry::direct(q(1), "a?", "A")),
            Err(MemoryError::DuplicateKey(q(1)))
        );
        m.put(MemoryEntry::direct(q(2), "b?", "B")).unwrap();
        let ids: Vec<_> = m.entries().map(|e| e.node_id).collect();
        assert_eq!(ids, vec![q(1), q(2)]);
    }

    #[test]
    fn entry_invariants_enforced() {
        let mut m = AnswerMemory::new();
        let mut bad = MemoryEntry::direct(q(1), "a?", "A");
        bad.summary = Some("s".into());
        assert_eq!(m.put(bad), Err(MemoryError::SummaryWithoutRetrieval(q(1))));
        assert_eq!(
            m.put(MemoryEntry::direct(q(1), "a?", "  ")),
            Err(MemoryError::EmptyAnswer(q(1)))
        );
    }

    #[test]
    fn lookup() {
        let mut m = AnswerMemory::new();
        m.put(MemoryEntry::direct(q(1), "a?", "  exact string ")).unwrap();
        assert_eq!(m.lookup_answer(q(1)).unwrap(), "  exact string ");
        assert_eq!(m.lookup_answer(q(2)), Err(MemoryError::MissingKey(q(2))));
    }

    #[test]
    fn render_examples() {
        assert_eq!(AnswerMemory::new().render_for_prompt(true), EMPTY_MEMORY_SENTINEL);

        let mut m = AnswerMemory::new();
        m.put(MemoryEntry::retrieved(q(1), "capital of France?", "Paris", Some("Paris is the capital.".into())))
            .unwrap();
        let with = m.render_for_prompt(true);
        assert_eq!(
            with,
            "[Q1] Question: capital of France?\nAnswer: Paris\nSummary: Paris is the capital."
        );
        assert_eq!(m.render_for_prompt(false), "[Q1] Question: capital of France?\nAnswer: Paris");
        assert_eq!(with, m.render_for_prompt(true));
    }

    #[test]
    fn serde_round_trip_keeps_order() {
        let mut m = AnswerMemory::new();
        m.put(MemoryEntry::direct(q(3), "c", "C")).unwrap();
        m.put(MemoryEntry::direct(q(1), "a", "A").from_refinement()).unwrap();
        let json = serde_json::to_string(&m).unwrap();
        let back: AnswerMemory = serde_json::from_str(&json).unwrap();
        assert_eq!(back, m);
    }

    proptest! {
        #[test]
        fn render_is_pure(answers in proptest::collection::vec(("[a-z ]{1,12}", "[a-z]{1,8}", proptest::option::of("[a-z ]{0,20}")), 0..6)) {
            let build = || {
                let mut m = AnswerMemory::new();
                for (i, (question, answer, summary)) in answers.iter().enumerate() {
                    let id = q(i as u32 + 1);
                    let entry = match summary {
                        Some(s) => MemoryEntry::retrieved(id, question.clone(), answer.clone(), Some(s.clone())),
                        None => MemoryEntry::direct(id, question.clone(), answer.clone()),
                    };
                    m.put(entry).unwrap();
                }
                m
            };
            let (a, b) = (build(), build());
            prop_assert_eq!(a.render_for_prompt(true), b.render_for_prompt(true));
            prop_assert_eq!(a.render_for_prompt(false), b.render_for_prompt(false));
        }
    }
}
