//! Chat-completion backends: an OpenAI-compatible HTTP client and a
//! deterministic offline stub.

use std::future::Future;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{EndpointConfig, EvalError};
use crate::reward::{DEFAULT_END_MARKER, DEFAULT_START_MARKER};
use crate::taskgen::TaskInstance;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: &str, content: impl Into<String>) -> Self {
        ChatMessage {
            role: role.to_string(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: Option<u64>,
    #[serde(default)]
    pub completion_tokens: Option<u64>,
    #[serde(default)]
    pub total_tokens: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatReply {
    pub content: String,
    pub usage: Option<Usage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    Connection,
    Timeout,
    Status(u16),
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendError {
    pub kind: FailureKind,
    pub message: String,
}

impl BackendError {
    /// Connection problems, timeouts, 429 and 5xx are worth retrying.
    pub fn retryable(&self) -> bool {
        match self.kind {
            FailureKind::Connection | FailureKind::Timeout => true,
            FailureKind::Status(s) => s == 429 || s >= 500,
            FailureKind::Malformed => false,
        }
    }
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            FailureKind::Status(s) => write!(f, "HTTP {s}: {}", self.message),
            FailureKind::Connection => write!(f, "connection failed: {}", self.message),
            FailureKind::Timeout => write!(f, "timed out: {}", self.message),
            FailureKind::Malformed => write!(f, "malformed response: {}", self.message),
        }
    }
}

pub trait ChatBackend: Send + Sync + 'static {
    fn complete(
        &self,
        task: &TaskInstance,
        messages: &[ChatMessage],
    ) -> impl Future<Output = Result<ChatReply, BackendError>> + Send;
}

/// POSTs to `{base_url}/v1/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: reqwest::Client,
    url: String,
    token: Option<String>,
    model: String,
    temperature: f64,
    top_p: f64,
    max_tokens: u32,
}

impl HttpBackend {
    /// Reads the bearer token from the configured environment variable.
    pub fn new(cfg: &EndpointConfig) -> Result<Self, EvalError> {
        let token = match &cfg.api_key_env {
            None => None,
            Some(var) => match std::env::var(var) {
                Ok(v) if !v.is_empty() => Some(v),
                _ => return Err(EvalError::MissingCredential(var.clone())),
            },
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| EvalError::Client(e.to_string()))?;
        Ok(HttpBackend {
            client,
            url: format!("{}/v1/chat/completions", cfg.base_url.trim_end_matches('/')),
            token,
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            max_tokens: cfg.max_tokens,
        })
    }
}

#[derive(Deserialize)]
struct WireReply {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

impl ChatBackend for HttpBackend {
    async fn complete(&self, _task: &TaskInstance, messages: &[ChatMessage]) -> Result<ChatReply, BackendError> {
        let body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
        });
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(t) = &self.token {
            req = req.bearer_auth(t);
        }
        let resp = req.send().await.map_err(|e| BackendError {
            kind: if e.is_timeout() {
                FailureKind::Timeout
            } else {
                FailureKind::Connection
            },
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().await.map_err(|e| BackendError {
            kind: FailureKind::Connection,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            let mut message = text;
            message.truncate(500);
            return Err(BackendError {
                kind: FailureKind::Status(status.as_u16()),
                message,
            });
        }
        let wire: WireReply = serde_json::from_str(&text).map_err(|e| BackendError {
            kind: FailureKind::Malformed,
            message: e.to_string(),
        })?;
        let content = wire
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError {
                kind: FailureKind::Malformed,
                message: "no choices[0].message.content".into(),
            })?;
        Ok(ChatReply {
            content,
            usage: wire.usage,
        })
    }
}

/// Answers from the task's own gold data. Tasks with gold evidence get one
/// recall span quoting it, except those whose id hashes into the
/// `skip_recall_one_in` bucket.
#[derive(Debug, Clone)]
pub struct StubBackend {
    pub start_marker: String,
    pub end_marker: String,
    pub skip_recall_one_in: u64,
}

impl Default for StubBackend {
    fn default() -> Self {
        StubBackend {
            start_marker: DEFAULT_START_MARKER.into(),
            end_marker: DEFAULT_END_MARKER.into(),
            skip_recall_one_in: 5,
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl StubBackend {
    pub fn reply_for(&self, task: &TaskInstance) -> String {
        let mut out = String::from("Let me work through this.\n");
        let skip = self.skip_recall_one_in > 0 && fnv1a(&task.id).is_multiple_of(self.skip_recall_one_in);
        if let Some(evidence) = task.metadata.gold_evidence.first().filter(|_| !skip) {
            out.push_str("The relevant entry reads ");
            out.push_str(&self.start_marker);
            out.push_str(evidence);
            out.push_str(&self.end_marker);
            out.push_str(".\n");
        }
        out.push_str("Answer: ");
        out.push_str(&task.gold_answers.join(", "));
        out
    }
}

impl ChatBackend for StubBackend {
    async fn complete(&self, task: &TaskInstance, _messages: &[ChatMessage]) -> Result<ChatReply, BackendError> {
        Ok(ChatReply {
            content: self.reply_for(task),
            usage: None,
        })
    }
}
