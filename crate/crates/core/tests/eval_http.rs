//! HttpBackend and run_batch against a local OpenAI-compatible stub server.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use recall_core::eval::{run_batch, BatchOptions, EndpointConfig, EvalError, HttpBackend};
use recall_core::taskgen::{generate, TaskCategory, TaskInstance, TaskSpec};

#[derive(Clone, Copy)]
enum Mode {
    Echo,
    FailFirst,
    Slow,
    Garbage,
}

#[derive(Default)]
struct Seen {
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    high_water: AtomicUsize,
    auth: Mutex<Vec<Option<String>>>,
    bodies: Mutex<Vec<Value>>,
}

#[derive(Clone)]
struct App {
    mode: Mode,
    seen: Arc<Seen>,
}

fn reply(content: &str) -> Value {
    json!({
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}}],
        "usage": {"prompt_tokens": 10, "completion_tokens": 3, "total_tokens": 13}
    })
}

async fn chat(State(app): State<App>, headers: HeaderMap, Json(body): Json<Value>) -> (StatusCode, String) {
    let seen = &app.seen;
    let n = seen.calls.fetch_add(1, Ordering::SeqCst);
    seen.auth
        .lock()
        .unwrap()
        .push(headers.get("authorization").map(|v| v.to_str().unwrap().to_string()));
    seen.bodies.lock().unwrap().push(body);
    match app.mode {
        Mode::Echo => (StatusCode::OK, reply("Answer: X").to_string()),
        Mode::FailFirst if n == 0 => (StatusCode::INTERNAL_SERVER_ERROR, "boom".into()),
        Mode::FailFirst => (StatusCode::OK, reply("Answer: X").to_string()),
        Mode::Slow => {
            let now = seen.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            seen.high_water.fetch_max(now, Ordering::SeqCst);
            tokio::time::sleep(Duration::from_millis(40)).await;
            seen.in_flight.fetch_sub(1, Ordering::SeqCst);
            (StatusCode::OK, reply("Answer: X").to_string())
        }
        Mode::Garbage => (StatusCode::OK, "{\"choices\": []}".into()),
    }
}

async fn spawn_server(mode: Mode) -> (String, Arc<Seen>) {
    let seen = Arc::new(Seen::default());
    let app = Router::new()
        .route("/v1/chat/completions", post(chat))
        .with_state(App { mode, seen: seen.clone() });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), seen)
}

fn tasks(n: u64) -> Vec<TaskInstance> {
    (0..n)
        .map(|s| generate(&TaskSpec::new(TaskCategory::KvRetrieval, 400, s)).unwrap())
        .collect()
}

fn endpoint(base_url: String) -> EndpointConfig {
    EndpointConfig {
        base_url,
        api_key_env: None,
        timeout_secs: 5.0,
        ..EndpointConfig::default()
    }
}

fn quick(cfg: &EndpointConfig) -> BatchOptions {
    BatchOptions {
        backoff: Duration::from_millis(5),
        ..BatchOptions::from_endpoint(cfg)
    }
}

#[tokio::test]
async fn echo_reply_is_parsed_and_sampling_params_sent() {
    let (url, seen) = spawn_server(Mode::Echo).await;
    let cfg = endpoint(url);
    let backend = Arc::new(HttpBackend::new(&cfg).unwrap());
    let results = run_batch(&tasks(3), backend, &quick(&cfg)).await;
    assert_eq!(results.len(), 3);
    for r in &results {
        assert_eq!(r.answer.as_deref(), Some("X"));
        assert!(r.error.is_none());
        assert_eq!(r.usage.as_ref().unwrap().total_tokens, Some(13));
    }
    let body = seen.bodies.lock().unwrap()[0].clone();
    assert_eq!(body["temperature"], 0.6);
    assert_eq!(body["top_p"], 0.95);
    assert_eq!(body["max_tokens"], 8192);
    assert_eq!(body["messages"][0]["role"], "system");
    assert_eq!(body["messages"][1]["role"], "user");
    assert!(seen.auth.lock().unwrap().iter().all(Option::is_none));
}

#[tokio::test]
async fn server_error_is_retried() {
    let (url, seen) = spawn_server(Mode::FailFirst).await;
    let cfg = EndpointConfig {
        retries: 2,
        max_concurrent: 1,
        ..endpoint(url)
    };
    let backend = Arc::new(HttpBackend::new(&cfg).unwrap());
    let results = run_batch(&tasks(1), backend, &quick(&cfg)).await;
    assert_eq!(results[0].retries, 1);
    assert_eq!(results[0].answer.as_deref(), Some("X"));
    assert_eq!(seen.calls.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn concurrency_is_capped() {
    let (url, seen) = spawn_server(Mode::Slow).await;
    let cfg = EndpointConfig {
        max_concurrent: 3,
        ..endpoint(url)
    };
    let backend = Arc::new(HttpBackend::new(&cfg).unwrap());
    let ts = tasks(12);
    let results = run_batch(&ts, backend, &quick(&cfg)).await;
    let ids: Vec<_> = results.iter().map(|r| r.task_id.clone()).collect();
    let want: Vec<_> = ts.iter().map(|t| t.id.clone()).collect();
    assert_eq!(ids, want);
    let hw = seen.high_water.load(Ordering::SeqCst);
    assert!(hw <= 3, "high water {hw}");
    assert!(hw >= 2, "requests never overlapped");
}

#[tokio::test]
async fn malformed_reply_is_recorded_per_task() {
    let (url, seen) = spawn_server(Mode::Garbage).await;
    let cfg = endpoint(url);
    let backend = Arc::new(HttpBackend::new(&cfg).unwrap());
    let results = run_batch(&tasks(2), backend, &quick(&cfg)).await;
    for r in &results {
        assert!(r.error.as_deref().unwrap().contains("choices"), "{:?}", r.error);
        assert!(r.completion.is_none());
        assert_eq!(r.score, 0.0);
    }
    // malformed bodies are not retried
    assert_eq!(seen.calls.load(Ordering::SeqCst), 2);
}

#[tokio::test]
async fn bearer_token_comes_from_env() {
    let (url, seen) = spawn_server(Mode::Echo).await;
    std::env::set_var("RECALL_TEST_TOKEN_A", "sekrit");
    let cfg = EndpointConfig {
        api_key_env: Some("RECALL_TEST_TOKEN_A".into()),
        ..endpoint(url)
    };
    let backend = Arc::new(HttpBackend::new(&cfg).unwrap());
    run_batch(&tasks(1), backend, &quick(&cfg)).await;
    assert_eq!(seen.auth.lock().unwrap()[0].as_deref(), Some("Bearer sekrit"));
}

#[test]
fn missing_credential_is_an_error() {
    let cfg = EndpointConfig {
        api_key_env: Some("RECALL_TEST_TOKEN_UNSET".into()),
        ..EndpointConfig::default()
    };
    match HttpBackend::new(&cfg) {
        Err(EvalError::MissingCredential(v)) => assert_eq!(v, "RECALL_TEST_TOKEN_UNSET"),
        other => panic!("expected MissingCredential, got {other:?}"),
    }
}

#[tokio::test]
async fn unreachable_endpoint_fails_after_retries() {
    // bind then drop to get a port nobody listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = EndpointConfig {
        retries: 2,
        ..endpoint(format!("http://127.0.0.1:{port}"))
    };
    let backend = Arc::new(HttpBackend::new(&cfg).unwrap());
    let results = run_batch(&tasks(1), backend, &quick(&cfg)).await;
    assert_eq!(results[0].retries, 2);
    assert!(results[0].error.as_deref().unwrap().contains("after 2 retries"));
}
