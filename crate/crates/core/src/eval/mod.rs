//! Batch evaluation against a chat-completions endpoint.

mod backend;
mod text;

pub use backend::{BackendError, ChatBackend, ChatMessage, ChatReply, FailureKind, HttpBackend, StubBackend, Usage};
pub use text::{completion_record, extract_text_spans, parse_answer, TextSpans};

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;

use crate::metrics::score_answer;
use crate::reward::{RewardTable, DEFAULT_END_MARKER, DEFAULT_START_MARKER};
use crate::taskgen::TaskInstance;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("environment variable {0} is not set; export the API key there, pick another variable with --api-key-env, or pass --no-auth")]
    MissingCredential(String),
    #[error("building HTTP client: {0}")]
    Client(String),
    #[error("recall usage rate of an empty result set")]
    NoResults,
    #[error("{path}:{line}: {message}")]
    Jsonl { path: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Placeholder system prompt; override it for real models.
pub const DEFAULT_SYSTEM_PROMPT: &str = "You are a careful assistant that reasons step by step. \
When you rely on the provided context, copy the exact text between <|start_recall|> and <|end_recall|> \
before using it. Finish with a line of the form \"Answer: ...\".";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token; `None` sends none.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub max_concurrent: usize,
    pub retries: u32,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        EndpointConfig {
            base_url: "http://127.0.0.1:8000".into(),
            model: "default".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            temperature: 0.6,
            top_p: 0.95,
            max_tokens: 8192,
            timeout_secs: 600.0,
            max_concurrent: 8,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchOptions {
    pub system_prompt: String,
    pub max_concurrent: usize,
    pub retries: u32,
    /// First retry delay; doubles on each further attempt.
    pub backoff: Duration,
    /// Task id → text sent as a partial assistant turn.
    pub prefixes: HashMap<String, String>,
    pub table: RewardTable,
    pub start_marker: String,
    pub end_marker: String,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            max_concurrent: 8,
            retries: 2,
            backoff: Duration::from_millis(200),
            prefixes: HashMap::new(),
            table: RewardTable::builtin(),
            start_marker: DEFAULT_START_MARKER.into(),
            end_marker: DEFAULT_END_MARKER.into(),
        }
    }
}

impl BatchOptions {
    pub fn from_endpoint(cfg: &EndpointConfig) -> Self {
        BatchOptions {
            max_concurrent: cfg.max_concurrent.max(1),
            retries: cfg.retries,
            ..BatchOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task_id: String,
    pub category: String,
    /// Full assistant text, including any injected prefix.
    pub completion: Option<String>,
    pub answer: Option<String>,
    pub score: f64,
    pub used_recall: bool,
    pub spans: Vec<String>,
    pub latency_ms: u64,
    #[serde(default)]
    pub usage: Option<Usage>,
    pub retries: u32,
    #[serde(default)]
    pub error: Option<String>,
}

/// The parts of a result that depend only on the completion text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub answer: Option<String>,
    pub score: f64,
    pub used_recall: bool,
    pub spans: Vec<String>,
    pub error: Option<String>,
}

/// Pure scoring of one completion.
pub fn score_completion(task: &TaskInstance, completion: &str, opts: &BatchOptions) -> Scored {
    let ex = extract_text_spans(completion, &opts.start_marker, &opts.end_marker);
    let answer = parse_answer(completion);
    let (score, error) = match opts.table.get(task.category.as_str()) {
        Ok(cfg) => match score_answer(cfg.answer_metric, answer.as_deref(), &task.gold_answers) {
            Ok(s) => (s, None),
            Err(e) => (0.0, Some(format!("scoring: {e}"))),
        },
        Err(e) => (0.0, Some(e.to_string())),
    };
    Scored {
        answer,
        score,
        used_recall: ex.used_recall(),
        spans: ex.spans,
        error,
    }
}

/// Recomputes the text-derived fields of a stored result.
pub fn rescore(result: &EvalResult, task: &TaskInstance, opts: &BatchOptions) -> EvalResult {
    let mut out = result.clone();
    if let Some(c) = &result.completion {
        let s = score_completion(task, c, opts);
        out.answer = s.answer;
        out.score = s.score;
        out.used_recall = s.used_recall;
        out.spans = s.spans;
        out.error = s.error;
    }
    out
}

pub fn build_messages(task: &TaskInstance, opts: &BatchOptions) -> Vec<ChatMessage> {
    let mut m = vec![
        ChatMessage::new("system", opts.system_prompt.clone()),
        ChatMessage::new("user", task.prompt.clone()),
    ];
    if let Some(p) = opts.prefixes.get(&task.id) {
        m.push(ChatMessage::new("assistant", p.clone()));
    }
    m
}

async fn run_one<B: ChatBackend>(backend: &B, task: &TaskInstance, opts: &BatchOptions) -> EvalResult {
    let messages = build_messages(task, opts);
    let started = Instant::now();
    let mut attempt = 0u32;
    let outcome = loop {
        match backend.complete(task, &messages).await {
            Ok(reply) => break Ok(reply),
            Err(e) if e.retryable() && attempt < opts.retries => {
                tokio::time::sleep(opts.backoff * 2u32.saturating_pow(attempt)).await;
                attempt += 1;
            }
            Err(e) => break Err(e),
        }
    };
    let latency_ms = started.elapsed().as_millis() as u64;
    let base = EvalResult {
        task_id: task.id.clone(),
        category: task.category.as_str().to_string(),
        completion: None,
        answer: None,
        score: 0.0,
        used_recall: false,
        spans: Vec::new(),
        latency_ms,
        usage: None,
        retries: attempt,
        error: None,
    };
    match outcome {
        Ok(reply) => {
            let prefix = opts.prefixes.get(&task.id).map(String::as_str).unwrap_or("");
            let completion = format!("{prefix}{}", reply.content);
            let s = score_completion(task, &completion, opts);
            EvalResult {
                completion: Some(completion),
                answer: s.answer,
                score: s.score,
                used_recall: s.used_recall,
                spans: s.spans,
                usage: reply.usage,
                error: s.error,
                ..base
            }
        }
        Err(e) => EvalResult {
            error: Some(format!("{e} (after {attempt} retries)")),
            ..base
        },
    }
}

/// Sends every task, at most `opts.max_concurrent` at a time. Failures are
/// recorded per task; results come back in task order.
pub async fn run_batch<B: ChatBackend>(tasks: &[TaskInstance], backend: Arc<B>, opts: &BatchOptions) -> Vec<EvalResult> {
    let permits = Arc::new(Semaphore::new(opts.max_concurrent.max(1)));
    let opts = Arc::new(opts.clone());
    let mut set = tokio::task::JoinSet::new();
    for (i, task) in tasks.iter().cloned().enumerate() {
        let permits = permits.clone();
        let backend = backend.clone();
        let opts = opts.clone();
        set.spawn(async move {
            let _permit = permits.acquire_owned().await.expect("semaphore never closed");
            (i, run_one(&*backend, &task, &opts).await)
        });
    }
    let mut out: Vec<Option<EvalResult>> = vec![None; tasks.len()];
    while let Some(joined) = set.join_next().await {
        match joined {
            Ok((i, r)) => out[i] = Some(r),
            Err(e) => std::panic::resume_unwind(e.into_panic()),
        }
    }
    out.into_iter().map(|r| r.expect("every task reports")).collect()
}

pub fn recall_usage_rate(results: &[EvalResult]) -> Result<f64, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    Ok(results.iter().filter(|r| r.used_recall).count() as f64 / results.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub n_errors: usize,
    pub mean_score: f64,
    pub recall_usage_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    #[serde(flatten)]
    pub overall: GroupSummary,
    pub per_category: BTreeMap<String, GroupSummary>,
}

fn group(results: &[&EvalResult]) -> GroupSummary {
    let n = results.len();
    let mean = |f: &dyn Fn(&EvalResult) -> f64| {
        if n == 0 {
            0.0
        } else {
            results.iter().map(|r| f(r)).sum::<f64>() / n as f64
        }
    };
    GroupSummary {
        n,
        n_errors: results.iter().filter(|r| r.error.is_some()).count(),
        mean_score: mean(&|r| r.score),
        recall_usage_rate: mean(&|r| if r.used_recall { 1.0 } else { 0.0 }),
    }
}

pub fn summarize(results: &[EvalResult]) -> EvalSummary {
    let all: Vec<&EvalResult> = results.iter().collect();
    let mut by_cat: BTreeMap<String, Vec<&EvalResult>> = BTreeMap::new();
    for r in results {
        by_cat.entry(r.category.clone()).or_default().push(r);
    }
    EvalSummary {
        overall: group(&all),
        per_category: by_cat.into_iter().map(|(k, v)| (k, group(&v))).collect(),
    }
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<Vec<T>, EvalError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| EvalError::Jsonl {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(v);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(items: &[T], mut w: W) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
