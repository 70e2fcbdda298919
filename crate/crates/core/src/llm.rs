//! Chat-completion clients: an OpenAI-compatible HTTP client and a scripted
//! client that replays responses from a JSONL fixture.

use std::collections::HashMap;
use std::io::BufRead;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response shape: {0}")]
    Protocol(String),
    #[error("no scripted response for {parent_id:?} attempt {attempt}")]
    Unscripted { parent_id: String, attempt: u32 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LlmRequest {
    pub model: String,
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: Option<u32>,
    /// Ask the server for a JSON object response.
    pub json_output: bool,
    /// Routing metadata for scripted clients; never sent over the wire.
    #[serde(skip)]
    pub parent_id: String,
    /// 1-based attempt number within one sentence's generate/validate loop.
    #[serde(skip)]
    pub attempt: u32,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user.trim().is_empty() {
            return Err(LlmError::InvalidRequest("empty user message".into()));
        }
        if self.system.as_deref().is_some_and(|s| s.trim().is_empty()) {
            return Err(LlmError::InvalidRequest("empty system message".into()));
        }
        Ok(())
    }

    /// Chat-completions request body.
    pub fn to_wire(&self) -> Value {
        let mut messages = Vec::new();
        if let Some(system) = &self.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": self.user}));
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
        });
        if let Some(max) = self.max_tokens {
            body["max_tokens"] = json!(max);
        }
        if self.json_output {
            body["response_format"] = json!({"type": "json_object"});
        }
        body
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub finish_reason: Option<String>,
    pub usage: Option<Usage>,
}

impl LlmResponse {
    /// Reads `choices[0].message.content` from a chat-completions reply.
    pub fn from_wire(body: &Value) -> Result<Self, LlmError> {
        let choice = body
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| LlmError::Protocol("missing choices[0]".into()))?;
        let text = choice
            .get("message")
            .and_then(|m| m.get("content"))
            .and_then(Value::as_str)
            .ok_or_else(|| LlmError::Protocol("missing choices[0].message.content".into()))?;
        Ok(Self {
            text: text.to_string(),
            finish_reason: choice
                .get("finish_reason")
                .and_then(Value::as_str)
                .map(str::to_string),
            usage: body
                .get("usage")
                .and_then(|u| serde_json::from_value(u.clone()).ok()),
        })
    }
}

/// Anything that can answer a chat-completion request. Implementations are
/// called from several worker threads at once.
pub trait LlmClient: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

/// Connection settings for an OpenAI-compatible server.
#[derive(Debug, Clone)]
pub struct Endpoint {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl Endpoint {
    pub fn new(base_url: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: None,
            timeout: Duration::from_secs(60),
        }
    }

    /// Reads the API key from the named environment variable, if set.
    pub fn with_api_key_from_env(mut self, var: &str) -> Self {
        self.api_key = std::env::var(var).ok().filter(|k| !k.is_empty());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn url(&self, path: &str) -> String {
        format!(
            "{}/{}",
            self.base_url.trim_end_matches('/'),
            path.trim_start_matches('/')
        )
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into()
    }

    /// POSTs a JSON body and parses the JSON reply.
    pub fn post_json(&self, path: &str, body: &Value) -> Result<Value, LlmError> {
        let mut req = self
            .agent()
            .post(&self.url(path))
            .content_type("application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(LlmError::Http { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| LlmError::Protocol(e.to_string()))
    }
}

/// Blocking client for `POST {base}/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpChatClient {
    endpoint: Endpoint,
}

impl HttpChatClient {
    pub fn new(endpoint: Endpoint) -> Self {
        Self { endpoint }
    }
}

impl LlmClient for HttpChatClient {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let body = self.endpoint.post_json("chat/completions", &request.to_wire())?;
        LlmResponse::from_wire(&body)
    }
}

/// One line of a scripted-response fixture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub parent_id: String,
    /// 1-based attempt; absent means any attempt without a more specific entry.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attempt: Option<u32>,
    pub body: String,
}

/// Replays fixture bodies keyed by parent sentence id and attempt number.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClient {
    exact: HashMap<(String, u32), String>,
    fallback: HashMap<String, String>,
}

impl ScriptedClient {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut client = Self::default();
        for e in entries {
            match e.attempt {
                Some(a) => {
                    client.exact.insert((e.parent_id, a), e.body);
                }
                None => {
                    client.fallback.insert(e.parent_id, e.body);
                }
            }
        }
        client
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(&line)
                .map_err(|e| format!("line {}: {e}", i + 1))?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn len(&self) -> usize {
        self.exact.len() + self.fallback.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl LlmClient for ScriptedClient {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let body = self
            .exact
            .get(&(request.parent_id.clone(), request.attempt))
            .or_else(|| self.fallback.get(&request.parent_id))
            .ok_or_else(|| LlmError::Unscripted {
                parent_id: request.parent_id.clone(),
                attempt: request.attempt,
            })?;
        Ok(LlmResponse {
            text: body.clone(),
            finish_reason: Some("stop".into()),
            usage: None,
        })
    }
}
