use std::time::Duration;

use serde::Serialize;

use super::{Passage, RetrievalError, Retriever};

/// Client for a search service answering `POST {query, top_k}` with an
/// array of `{id, title, text, score}`.
pub struct RemoteRetriever {
    endpoint: String,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct SearchRequest<'a> {
    query: &'a str,
    top_k: usize,
}

impl RemoteRetriever {
    pub fn new(endpoint: String, timeout_secs: u64) -> Result<Self, RetrievalError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(timeout_secs))
            .build()
            .map_err(|e| RetrievalError::EndpointUnreachable(e.to_string()))?;
        Ok(Self { endpoint, client })
    }
}

impl Retriever for RemoteRetriever {
    fn search(&self, query: &str, top_k: usize) -> Result<Vec<Passage>, RetrievalError> {
        if query.trim().is_empty() {
            return Err(RetrievalError::EmptyQuery);
        }
        if top_k == 0 {
            return Err(RetrievalError::InvalidTopK);
        }
        let response = self
            .client
            .post(&self.endpoint)
            .json(&SearchRequest { query, top_k })
            .send()
            .map_err(|e| RetrievalError::EndpointUnreachable(e.to_string()))?;
        let status = response.status();
        let body = response.text().map_err(|e| RetrievalError::BadResponse(e.to_string()))?;
        if !status.is_success() {
            return Err(RetrievalError::BadResponse(format!("status {status}: {body}")));
        }
        let mut passages: Vec<Passage> =
            serde_json::from_str(&body).map_err(|e| RetrievalError::BadResponse(e.to_string()))?;
        if let Some(bad) = passages.iter().find(|p| !p.score.is_finite()) {
            return Err(RetrievalError::BadResponse(format!("passage {} has a non-finite score", bad.id)));
        }
        passages.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut seen = std::collections::HashSet::new();
        passages.retain(|p| seen.insert(p.id.clone()));
        passages.truncate(top_k);
        Ok(passages)
    }
}
