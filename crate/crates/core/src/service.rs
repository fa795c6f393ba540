//! Mask service: exposes [`GenerationState`] sessions over newline-delimited
//! JSON, either as an HTTP endpoint or on standard input/output.
//!
//! Requests, one per line:
//!
//! ```text
//! {"op":"create","context":[5,7,5,9],"config":{"r_start_id":100,"r_end_id":101,"vocab_size":102}}
//! {"op":"observe","session":"s1","token":100}
//! {"op":"mask","session":"s1","format":"ids"}        // or "bitset"
//! {"op":"close","session":"s1"}
//! ```
//!
//! Every response echoes `op` (and `id`, if the request carried one). Errors
//! come back as `{"op":..,"error":{"code":..,"message":..}}` and never end
//! the connection.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::State;
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::Router;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::io::{AsyncBufReadExt, AsyncRead, AsyncWrite, AsyncWriteExt, BufReader};

use crate::context::{CharInterval, TokenId};
use crate::decoder::{DecodeError, DecoderConfig, GenerationState, Mode, RecallSpan};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFormat {
    #[default]
    Ids,
    /// Base64 of the little-endian packed bitset, bit `i` = token `i`.
    Bitset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MaskRequest {
    Create {
        context: Vec<TokenId>,
        config: DecoderConfig,
        #[serde(default)]
        offsets: Option<Vec<CharInterval>>,
    },
    Observe {
        session: String,
        token: TokenId,
    },
    Mask {
        session: String,
        #[serde(default)]
        format: MaskFormat,
    },
    Close {
        session: String,
    },
}

impl MaskRequest {
    fn op(&self) -> &'static str {
        match self {
            MaskRequest::Create { .. } => "create",
            MaskRequest::Observe { .. } => "observe",
            MaskRequest::Mask { .. } => "mask",
            MaskRequest::Close { .. } => "close",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    UnknownSession,
    InvalidContinuation,
    InvalidConfig,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub op: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allowed: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bitset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spans: Option<Vec<RecallSpan>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ErrorBody>,
}

impl MaskResponse {
    fn error(op: Option<String>, code: ErrorCode, message: impl Into<String>) -> Self {
        MaskResponse {
            op,
            error: Some(ErrorBody {
                code,
                message: message.into(),
            }),
            ..Default::default()
        }
    }
}

type Session = Arc<Mutex<GenerationState>>;

/// Session table shared by all connections. Each session has its own lock,
/// so operations on one session are serialized while sessions run in
/// parallel.
#[derive(Default)]
pub struct MaskService {
    sessions: Mutex<HashMap<String, Session>>,
    next_id: AtomicU64,
}

impl MaskService {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session table poisoned").len()
    }

    fn lookup(&self, id: &str) -> Option<Session> {
        self.sessions.lock().expect("session table poisoned").get(id).cloned()
    }

    pub fn handle(&self, req: MaskRequest) -> MaskResponse {
        let op = Some(req.op().to_string());
        let unknown = |s: &str| MaskResponse::error(op.clone(), ErrorCode::UnknownSession, format!("no session {s:?}"));
        match req {
            MaskRequest::Create {
                context,
                config,
                offsets,
            } => match GenerationState::with_offsets(context, offsets, config) {
                Ok(state) => {
                    let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1);
                    self.sessions
                        .lock()
                        .expect("session table poisoned")
                        .insert(id.clone(), Arc::new(Mutex::new(state)));
                    MaskResponse {
                        op,
                        session: Some(id),
                        mode: Some(Mode::Outside),
                        ..Default::default()
                    }
                }
                Err(e) => MaskResponse::error(op, ErrorCode::InvalidConfig, e.to_string()),
            },
            MaskRequest::Observe { session, token } => {
                let Some(s) = self.lookup(&session) else {
                    return unknown(&session);
                };
                let mut state = s.lock().expect("session poisoned");
                match state.observe_token(token) {
                    Ok(()) => MaskResponse {
                        op,
                        mode: Some(state.mode()),
                        session: Some(session),
                        ..Default::default()
                    },
                    Err(e @ DecodeError::InvalidContinuation { .. }) => MaskResponse {
                        session: Some(session),
                        mode: Some(state.mode()),
                        ..MaskResponse::error(op, ErrorCode::InvalidContinuation, e.to_string())
                    },
                    Err(e) => MaskResponse::error(op, ErrorCode::Internal, e.to_string()),
                }
            }
            MaskRequest::Mask { session, format } => {
                let Some(s) = self.lookup(&session) else {
                    return unknown(&session);
                };
                let mut state = s.lock().expect("session poisoned");
                let mask = match state.next_token_mask() {
                    Ok(m) => m,
                    Err(e) => return MaskResponse::error(op, ErrorCode::Internal, e.to_string()),
                };
                let mut resp = MaskResponse {
                    op,
                    mode: Some(state.mode()),
                    session: Some(session),
                    ..Default::default()
                };
                match format {
                    MaskFormat::Ids => resp.allowed = Some(mask.allowed_ids()),
                    MaskFormat::Bitset => {
                        resp.bitset = Some(base64::engine::general_purpose::STANDARD.encode(mask.to_bytes()));
                        resp.vocab_size = Some(mask.len());
                    }
                }
                resp
            }
            MaskRequest::Close { session } => {
                let removed = self.sessions.lock().expect("session table poisoned").remove(&session);
                let Some(s) = removed else {
                    return unknown(&session);
                };
                let state = s.lock().expect("session poisoned");
                MaskResponse {
                    op,
                    mode: Some(state.mode()),
                    spans: Some(state.extract_spans()),
                    session: Some(session),
                    ..Default::default()
                }
            }
        }
    }

    /// Parses and answers one request line.
    pub fn handle_line(&self, line: &str) -> MaskResponse {
        let raw: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return MaskResponse::error(None, ErrorCode::BadRequest, format!("invalid JSON: {e}")),
        };
        let id = raw.get("id").cloned();
        let op = raw.get("op").and_then(Value::as_str).map(str::to_string);
        let mut resp = match serde_json::from_value::<MaskRequest>(raw) {
            Ok(req) => self.handle(req),
            Err(e) => MaskResponse::error(op, ErrorCode::BadRequest, e.to_string()),
        };
        resp.id = id;
        resp
    }

    /// Answers every non-blank line of an NDJSON body.
    pub fn handle_body(&self, body: &str) -> String {
        let mut out = String::new();
        for line in body.lines().filter(|l| !l.trim().is_empty()) {
            out.push_str(&serde_json::to_string(&self.handle_line(line)).expect("response serializes"));
            out.push('\n');
        }
        out
    }
}

async fn mask_endpoint(State(svc): State<Arc<MaskService>>, body: String) -> impl IntoResponse {
    let out = tokio::task::spawn_blocking(move || svc.handle_body(&body))
        .await
        .unwrap_or_else(|e| {
            let r = MaskResponse::error(None, ErrorCode::Internal, e.to_string());
            serde_json::to_string(&r).expect("response serializes") + "\n"
        });
    ([(header::CONTENT_TYPE, "application/x-ndjson")], out)
}

pub fn router(svc: Arc<MaskService>) -> Router {
    Router::new()
        .route("/v1/mask", post(mask_endpoint))
        .route("/health", get(|| async { "ok" }))
        .with_state(svc)
}

/// Serves on an already-bound listener until the task is dropped.
pub async fn serve_listener(listener: tokio::net::TcpListener, svc: Arc<MaskService>) -> std::io::Result<()> {
    axum::serve(listener, router(svc)).await
}

pub async fn serve(addr: SocketAddr, svc: Arc<MaskService>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(listener, svc).await
}

/// Line-framed mode: one request per input line, one response per output
/// line, flushed after each.
pub async fn serve_stdio<R, W>(svc: Arc<MaskService>, input: R, mut output: W) -> std::io::Result<()>
where
    R: AsyncRead + Unpin,
    W: AsyncWrite + Unpin,
{
    let mut lines = BufReader::new(input).lines();
    while let Some(line) = lines.next_line().await? {
        if line.trim().is_empty() {
            continue;
        }
        let resp = svc.handle_line(&line);
        let mut text = serde_json::to_string(&resp).expect("response serializes");
        text.push('\n');
        output.write_all(text.as_bytes()).await?;
        output.flush().await?;
    }
    Ok(())
}
