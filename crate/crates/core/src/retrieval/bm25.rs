//! Okapi BM25 over a line-delimited corpus.
//!
//! Corpus records are JSON objects `{id, title, text}` (`contents` is
//! accepted for `text`, `title` may be absent). Title and text are indexed
//! together. The index is persisted next to the corpus as
//! `<corpus>.index.json`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Passage, RetrievalError, Retriever};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

const INDEX_VERSION: u32 = 1;

/// Lowercases, drops every character that is neither alphanumeric nor
/// whitespace, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

pub fn index_path(corpus_path: &Path) -> PathBuf {
    let mut name = corpus_path.file_name().unwrap_or_default().to_os_string();
    name.push(".index.json");
    corpus_path.with_file_name(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub doc_count: usize,
    pub term_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredDoc {
    id: String,
    title: String,
    text: String,
    len: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredIndex {
    version: u32,
    avg_doc_len: f64,
    docs: Vec<StoredDoc>,
    /// term -> (doc index, term frequency), doc indices ascending.
    postings: BTreeMap<String, Vec<(u32, u32)>>,
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: serde_json::Value,
    #[serde(default)]
    title: Option<String>,
    #[serde(alias = "contents")]
    text: Option<String>,
}

fn read_corpus(path: &Path) -> Result<Vec<(String, String, String)>, RetrievalError> {
    let raw = fs::read_to_string(path).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
    let mut docs = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let malformed = |reason: String| RetrievalError::MalformedCorpusLine { line: line_no, reason };
        let record: CorpusRecord = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let id = match record.id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(malformed(format!("id must be a string or number, got {other}"))),
        };
        let text = record.text.ok_or_else(|| malformed("missing text field".into()))?;
        if !ids.insert(id.clone()) {
            return Err(malformed(format!("duplicate id {id:?}")));
        }
        docs.push((id, record.title.unwrap_or_default(), text));
    }
    if docs.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    Ok(docs)
}

fn build_stored(docs: Vec<(String, String, String)>) -> StoredIndex {
    let mut postings: BTreeMap<String, Vec<(u32, u32)>> = BTreeMap::new();
    let mut stored = Vec::with_capacity(docs.len());
    let mut total_len = 0u64;
    for (idx, (id, title, text)) in docs.into_iter().enumerate() {
        let tokens = tokenize(&format!("{title} {text}"));
        let mut tf: BTreeMap<String, u32> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        for (term, count) in tf {
            postings.entry(term).or_default().push((idx as u32, count));
        }
        total_len += tokens.len() as u64;
        stored.push(StoredDoc { id, title, text, len: tokens.len() as u32 });
    }
    StoredIndex {
        version: INDEX_VERSION,
        avg_doc_len: total_len as f64 / stored.len() as f64,
        docs: stored,
        postings,
    }
}

/// Builds the index for `corpus_path` and persists it beside the corpus.
pub fn build_index(corpus_path: &Path) -> Result<IndexSummary, RetrievalError> {
    let index = LocalIndex::build(corpus_path)?;
    let json = serde_json::to_string(&index.stored).map_err(|e| RetrievalError::Io(e.to_string()))?;
    fs::write(index_path(corpus_path), json).map_err(|e| RetrievalError::Io(e.to_string()))?;
    Ok(index.summary())
}

#[derive(Debug, Clone)]
pub struct LocalIndex {
    stored: StoredIndex,
}

impl LocalIndex {
    /// Builds in memory without persisting.
    pub fn build(corpus_path: &Path) -> Result<Self, RetrievalError> {
        Ok(Self { stored: build_stored(read_corpus(corpus_path)?) })
    }

    /// Loads the persisted index for `corpus_path`.
    pub fn open(corpus_path: &Path) -> Result<Self, RetrievalError> {
        let path = index_path(corpus_path);
        let raw = fs::read_to_string(&path).map_err(|_| RetrievalError::IndexNotBuilt(corpus_path.to_path_buf()))?;
        let stored: StoredIndex =
            serde_json::from_str(&raw).map_err(|e| RetrievalError::Io(format!("{}: {e}", path.display())))?;
        if stored.version != INDEX_VERSION {
            return Err(RetrievalError::IndexNotBuilt(corpus_path.to_path_buf()));
        }
        Ok(Self { stored })
    }

    pub fn summary(&self) -> IndexSummary {
        IndexSummary { doc_count: self.stored.docs.len(), term_count: self.stored.postings.len() }
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.stored.docs.len() as f64;
        let df = df as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

impl Retriever for LocalIndex {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if top_k == 0 {
            return Err(RetrievalError::InvalidTopK);
        }
        let terms: BTreeSet<String> = tokenize(query).into_iter().collect();
        let avg = self.stored.avg_doc_len;
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for term in &terms {
            let Some(list) = self.stored.postings.get(term) else { continue };
            let idf = self.idf(list.len());
            for &(doc, tf) in list {
                let tf = tf as f64;
                let len = self.stored.docs[doc as usize].len as f64;
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * len / avg);
                *scores.entry(doc).or_default() += idf * tf * (BM25_K1 + 1.0) / (tf + norm);
            }
        }
        let mut ranked: Vec<(u32, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.stored.docs[a.0 as usize].id.cmp(&self.stored.docs[b.0 as usize].id))
        });
        ranked.truncate(top_k);
        Ok(ranked
            .into_iter()
            .map(|(doc, score)| {
                let d = &self.stored.docs[doc as usize];
                Passage { id: d.id.clone(), title: d.title.clone(), text: d.text.clone(), score }
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("corpus.jsonl");
        fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    const THREE: [&str; 3] = [
        r#"{"id":"d1","title":"Paris","text":"Capital city of France."}"#,
        r#"{"id":"d2","title":"Berlin","text":"Capital city of Germany."}"#,
        r#"{"id":"d3","title":"Madrid","contents":"Capital city of Spain."}"#,
    ];

    #[test]
    fn tokenizer_strips_punctuation() {
        assert_eq!(tokenize("Hello, World!  It's"), vec!["hello", "world", "its"]);
        assert!(tokenize("?!").is_empty());
    }

    #[test]
    fn title_match_ranks_first() {
        let dir = tempfile::tempdir().unwrap();
        let index = LocalIndex::build(&corpus(dir.path(), &THREE)).unwrap();
        let hits = index.search("berlin", 5).unwrap();
        assert_eq!(hits[0].id, "d2");
        assert_eq!(hits.len(), 1);
    }

    #[test]
    fn no_overlap_gives_empty_list() {
        let dir = tempfile::tempdir().unwrap();
        let index = LocalIndex::build(&corpus(dir.path(), &THREE)).unwrap();
        assert!(index.search("tokyo", 5).unwrap().is_empty());
        assert_eq!(index.search("   ", 5), Err(RetrievalError::EmptyQuery));
    }

    #[test]
    fn ties_break_by_id_and_top_k_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let index = LocalIndex::build(&corpus(dir.path(), &THREE)).unwrap();
        let hits = index.search("capital city", 2).unwrap();
        let ids: Vec<_> = hits.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["d1", "d2"]);
        assert!(hits[0].score >= hits[1].score);
    }

    #[test]
    fn build_and_open_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = corpus(dir.path(), &THREE);
        assert!(matches!(LocalIndex::open(&path), Err(RetrievalError::IndexNotBuilt(_))));
        let first = build_index(&path).unwrap();
        assert_eq!(first.doc_count, 3);
        let second = build_index(&path).unwrap();
        assert_eq!(first, second);
        assert!(index_path(&path).exists());
        let opened = LocalIndex::open(&path).unwrap();
        assert_eq!(opened.summary(), first);
        assert_eq!(opened.search("madrid", 1).unwrap()[0].id, "d3");
    }

    #[test]
    fn malformed_lines_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = corpus(dir.path(), &[THREE[0], r#"{"id":"d2","title":"x"}"#]);
        assert!(matches!(build_index(&path), Err(RetrievalError::MalformedCorpusLine { line: 2, .. })));
        let path = corpus(dir.path(), &[THREE[0], "{not json"]);
        assert!(matches!(build_index(&path), Err(RetrievalError::MalformedCorpusLine { line: 2, .. })));
        let path = corpus(dir.path(), &[THREE[0], THREE[0]]);
        assert!(matches!(build_index(&path), Err(RetrievalError::MalformedCorpusLine { line: 2, .. })));
        let path = corpus(dir.path(), &["", "  "]);
        assert_eq!(build_index(&path), Err(RetrievalError::EmptyCorpus));
    }

    #[test]
    fn numeric_ids_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = corpus(dir.path(), &[r#"{"id":7,"contents":"\"Paris\"\nParis is large."}"#]);
        let index = LocalIndex::build(&path).unwrap();
        assert_eq!(index.search("paris", 1).unwrap()[0].id, "7");
    }
}
