//! Passage retrieval: a local BM25 index for desk-scale corpora or a remote
//! search endpoint.

mod bm25;
mod remote;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use bm25::{build_index, index_path, tokenize, IndexSummary, LocalIndex, BM25_B, BM25_K1};
pub use remote::RemoteRetriever;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RetrievalError {
    #[error("no index built for {0}; run build_index first")]
    IndexNotBuilt(PathBuf),
    #[error("search endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("search endpoint returned an unusable response: {0}")]
    BadResponse(String),
    #[error("empty query")]
    EmptyQuery,
    #[error("corpus line {line}: {reason}")]
    MalformedCorpusLine { line: usize, reason: String },
    #[error("corpus has no documents")]
    EmptyCorpus,
    #[error("retrieval returned no passages")]
    EmptyResult,
    #[error("top_k must be at least 1")]
    InvalidTopK,
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    pub text: String,
    /// Relevance; higher is better.
    pub score: f64,
}

pub trait Retriever: Send + Sync {
    /// At most `top_k` passages, best first.
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrievalError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrieverKind {
    Remote,
    #[default]
    LocalLexical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrieverConfig {
    pub kind: RetrieverKind,
    pub top_k: usize,
    pub corpus_path: Option<PathBuf>,
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_timeout() -> u64 {
    30
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self { kind: RetrieverKind::LocalLexical, top_k: 5, corpus_path: None, endpoint: None, timeout_secs: default_timeout() }
    }
}

impl RetrieverConfig {
    /// Opens the configured retriever. A local corpus without a persisted
    /// index is an error rather than an implicit build.
    pub fn open(&self) -> Result<Box<dyn Retriever>, RetrievalError> {
        if self.top_k == 0 {
            return Err(RetrievalError::InvalidTopK);
        }
        match self.kind {
            RetrieverKind::LocalLexical => {
                let corpus = self
                    .corpus_path
                    .as_ref()
                    .ok_or_else(|| RetrievalError::Io("local retriever needs a corpus path".into()))?;
                Ok(Box::new(LocalIndex::open(corpus)?))
            }
            RetrieverKind::Remote => {
                let endpoint = self
                    .endpoint
                    .as_ref()
                    .ok_or_else(|| RetrievalError::EndpointUnreachable("no endpoint configured".into()))?;
                Ok(Box::new(RemoteRetriever::new(endpoint.clone(), self.timeout_secs)?))
            }
        }
    }
}

/// Head of a result list; stands in for the summarizer when it is disabled.
pub fn first_passage(passages: &[Passage]) -> Result<&Passage, RetrievalError> {
    passages.first().ok_or(RetrievalError::EmptyResult)
}
