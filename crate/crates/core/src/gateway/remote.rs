//! Chat-completions client.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Backend, BackendCall, GatewayError};

pub const ENV_GATEWAY_URL: &str = "ROLEGRAPH_GATEWAY_URL";
pub const ENV_GATEWAY_TOKEN: &str = "ROLEGRAPH_GATEWAY_TOKEN";
pub const ENV_GATEWAY_TIMEOUT: &str = "ROLEGRAPH_GATEWAY_TIMEOUT";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteConfig {
    /// Base URL; requests go to `<base_url>/chat/completions`.
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout_secs: u64,
}

impl RemoteConfig {
    /// Reads the base URL, bearer token and timeout from the environment.
    pub fn from_env(model: impl Into<String>) -> Option<Self> {
        let base_url = std::env::var(ENV_GATEWAY_URL).ok()?;
        let token = std::env::var(ENV_GATEWAY_TOKEN).ok().filter(|t| !t.is_empty());
        let timeout_secs = std::env::var(ENV_GATEWAY_TIMEOUT)
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(60);
        Some(Self { base_url, model: model.into(), token, timeout_secs })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f32,
    max_tokens: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Option<ResponseMessage>,
    text: Option<String>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

pub struct RemoteBackend {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::BackendUnreachable(e.to_string()))?;
        Ok(Self { config, client })
    }
}

impl Backend for RemoteBackend {
    fn complete(&self, call: &BackendCall<'_>) -> Result<String, GatewayError> {
        let body = ChatRequest {
            model: &self.config.model,
            messages: [ChatMessage { role: "user", content: call.input }],
            temperature: call.request.temperature,
            max_tokens: call.request.max_tokens,
            stop: &call.request.stop,
        };
        let mut request = self.client.post(self.config.endpoint()).json(&body);
        if let Some(token) = &self.config.token {
            request = request.bearer_auth(token);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout(self.config.timeout_secs)
            } else {
                GatewayError::BackendUnreachable(e.to_string())
            }
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::BackendError { status: status.as_u16(), body: text });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("response has no choices".into()))?;
        choice
            .message
            .and_then(|m| m.content)
            .or(choice.text)
            .ok_or_else(|| GatewayError::MalformedResponse("choice has no content".into()))
    }
}
