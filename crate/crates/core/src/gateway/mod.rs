//! Generation gateway shared by all six roles.
//!
//! A role is activated either by an instruction prompt or by appending that
//! role's reserved token literals to the input (`[X; t1; ...; tn]`). The
//! transport behind the gateway is a [`Backend`]: a chat-completions endpoint
//! or a scripted rule table for deterministic runs.

mod adapter;
mod remote;
mod scripted;
mod tokens;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adapter::{
    load_role_adapter, write_role_adapter, AdapterError, AdapterManifest, AdapterRole,
    ADAPTER_MAGIC, ADAPTER_VERSION,
};
pub use remote::{RemoteBackend, RemoteConfig, ENV_GATEWAY_TIMEOUT, ENV_GATEWAY_TOKEN, ENV_GATEWAY_URL};
pub use scripted::{load_rules, Matcher, ScriptedBackend, ScriptedRule};
pub use tokens::{TokenCounter, WhitespaceTokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleId {
    GraphBuilder,
    RetrievalJudge,
    SubAnswer,
    Summarizer,
    NewQuery,
    Reasoner,
}

impl RoleId {
    pub const ALL: [RoleId; 6] = [
        RoleId::GraphBuilder,
        RoleId::RetrievalJudge,
        RoleId::SubAnswer,
        RoleId::Summarizer,
        RoleId::NewQuery,
        RoleId::Reasoner,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoleId::GraphBuilder => "graph_builder",
            RoleId::RetrievalJudge => "retrieval_judge",
            RoleId::SubAnswer => "sub_answer",
            RoleId::Summarizer => "summarizer",
            RoleId::NewQuery => "new_query",
            RoleId::Reasoner => "reasoner",
        }
    }
}

impl fmt::Display for RoleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoleId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RoleId::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| format!("unknown role {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("backend returned status {status}: {body}")]
    BackendError { status: u16, body: String },
    #[error("backend response could not be read: {0}")]
    MalformedResponse(String),
    #[error("request timed out after {0}s")]
    Timeout(u64),
    #[error("no scripted rule for role {role} matches prompt {excerpt:?}")]
    NoScriptMatch { role: RoleId, excerpt: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    fn is_transport(&self) -> bool {
        matches!(self, GatewayError::BackendUnreachable(_) | GatewayError::Timeout(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub role: RoleId,
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f32,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl GenerationRequest {
    pub fn new(role: RoleId, prompt: impl Into<String>) -> Self {
        Self {
            role,
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
            stop: Vec::new(),
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// What a backend receives: the request plus the exact input text on the wire.
#[derive(Debug, Clone)]
pub struct BackendCall<'a> {
    pub request: &'a GenerationRequest,
    pub input: &'a str,
}

pub trait Backend: Send + Sync {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, GatewayError>;
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationMode {
    #[default]
    InstructionPrompt,
    RoleTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleTokenConfig {
    pub mode: ActivationMode,
    pub tokens_per_role: usize,
    #[serde(default)]
    pub token_strings: BTreeMap<RoleId, Vec<String>>,
}

impl Default for RoleTokenConfig {
    fn default() -> Self {
        Self {
            mode: ActivationMode::InstructionPrompt,
            tokens_per_role: 30,
            token_strings: BTreeMap::new(),
        }
    }
}

impl RoleTokenConfig {
    /// Role-token mode with the reserved literals `<|role:<name>:<i>|>`.
    pub fn reserved(tokens_per_role: usize) -> Self {
        let token_strings = RoleId::ALL
            .into_iter()
            .map(|role| {
                let literals = (0..tokens_per_role)
                    .map(|i| format!("<|role:{}:{i}|>", role.as_str()))
                    .collect();
                (role, literals)
            })
            .collect();
        Self {
            mode: ActivationMode::RoleTokens,
            tokens_per_role,
            token_strings,
        }
    }

    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.mode != ActivationMode::RoleTokens {
            return Ok(());
        }
        for role in RoleId::ALL {
            let found = self.token_strings.get(&role).map_or(0, Vec::len);
            if found != self.tokens_per_role {
                return Err(AdapterError::RoleCountMismatch {
                    role: role.to_string(),
                    expected: self.tokens_per_role,
                    found,
                });
            }
        }
        Ok(())
    }

    pub fn literal_count(&self) -> usize {
        self.token_strings.values().map(Vec::len).sum()
    }

    /// The text actually sent for `role`.
    pub fn wire_input(&self, role: RoleId, prompt: &str) -> String {
        match self.mode {
            ActivationMode::InstructionPrompt => prompt.to_string(),
            ActivationMode::RoleTokens => {
                let mut input = prompt.to_string();
                for literal in self.token_strings.get(&role).into_iter().flatten() {
                    input.push_str(literal);
                }
                input
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    /// Input as transmitted, including any role tokens.
    pub input: String,
}

#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn Backend>,
    role_tokens: RoleTokenConfig,
    tokenizer: Arc<dyn TokenCounter>,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("role_tokens", &self.role_tokens)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            role_tokens: RoleTokenConfig::default(),
            tokenizer: Arc::new(WhitespaceTokenizer),
        }
    }

    pub fn with_role_tokens(mut self, config: RoleTokenConfig) -> Result<Self, AdapterError> {
        config.validate()?;
        self.role_tokens = config;
        Ok(self)
    }

    pub fn with_tokenizer(mut self, tokenizer: Arc<dyn TokenCounter>) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn role_tokens(&self) -> &RoleTokenConfig {
        &self.role_tokens
    }

    pub fn mode(&self) -> ActivationMode {
        self.role_tokens.mode
    }

    /// Sends one request. Transport failures are retried once.
    pub fn generate(&self, request: &GenerationRequest) -> Result<Generation, GatewayError> {
        request.validate()?;
        let input = self.role_tokens.wire_input(request.role, &request.prompt);
        let call = BackendCall {
            request,
            input: &input,
        };
        let text = match self.backend.complete(&call) {
            Err(e) if e.is_transport() => {
                tracing::warn!(role = %request.role, error = %e, "retrying after transport error");
                self.backend.complete(&call)?
            }
            other => other?,
        };
        Ok(Generation { text, input })
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.tokenizer.count(text)
    }
}
