use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use patience_core::backend::{
    self, Backend, BackendConfig, BackendError, BackendResult, Dialogue, RawWeights,
};
use patience_core::kb::DiseaseEntry;
use patience_core::prob::CandidateQuestion;
use patience_core::sim::PatientProfile;
use patience_core::{DiseaseDistribution, KnowledgeBase, SessionConfig};
use patience_service::{router, AppState, ServiceConfig};

const OPENING: &str = "My nose keeps running and I can't stop sneezing, my eyes itch too.";
const ANSWERS: [&str; 6] = [
    "Yes, it's much worse when I visit my sister's cat, and in spring with the pollen.",
    "It comes back every spring, this time about three weeks.",
    "I tried some nasal spray from the pharmacy.",
    "A bit, I wake up sneezing.",
    "No, nobody else at home.",
    "No, nobody smokes.",
];

fn root() -> PathBuf {
    PathBuf::from("../..")
}

fn session_config() -> SessionConfig {
    let mut backend = BackendConfig::scripted(root().join("data/script_bundle"));
    backend.strict = true;
    SessionConfig { kb_path: Some(root().join("data/sample_kb.jsonl")), backend, ..SessionConfig::default() }
}

fn six_rounds() -> Value {
    json!({"max_turns": 6, "stop_entropy": null, "stop_top1": null, "stop_on_uninformative": false})
}

fn app_with(config: ServiceConfig, wrap: impl FnOnce(Arc<dyn Backend>) -> Arc<dyn Backend>) -> Router {
    let kb = Arc::new(KnowledgeBase::ingest(config.session.kb_path.as_ref().unwrap()).unwrap());
    let backend = wrap(backend::connect(&config.session.backend).unwrap());
    router(Arc::new(AppState::new(kb, backend, config))).unwrap()
}

fn app() -> Router {
    app_with(ServiceConfig::new(session_config()), |b| b)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes)
        .unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()));
    (status, value)
}

async fn create(app: &Router, config: Value) -> (String, Value) {
    let (status, body) =
        call(app, Method::POST, "/sessions", Some(json!({"opening": OPENING, "config": config}))).await;
    assert_eq!(status, StatusCode::CREATED, "{body}");
    (body["session_id"].as_str().unwrap().to_string(), body)
}

fn mass(payload: &Value) -> f64 {
    payload["distribution"].as_array().unwrap().iter().map(|e| e["p"].as_f64().unwrap()).sum::<f64>()
        + payload["other"].as_f64().unwrap()
}

/// Replaces the random session id so payloads can be compared to fixtures.
fn redact(v: &Value, id: &str) -> Value {
    serde_json::from_str(&v.to_string().replace(id, "<session>")).unwrap()
}

fn fixture(name: &str, actual: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    let text = serde_json::to_string_pretty(actual).unwrap() + "\n";
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, text).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(text, expected, "fixture mismatch: {}", path.display());
}

#[tokio::test]
async fn healthz() {
    let (status, body) = call(&app(), Method::GET, "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, "ok");
}

#[tokio::test]
async fn create_returns_first_question() {
    let app = app();
    let (_, body) = create(&app, json!({})).await;
    assert_eq!(body["status"], "active");
    assert_eq!(body["iteration"], 0);
    assert_eq!(body["question"]["text"], "Do your symptoms get worse around pollen, dust or pets?");
    assert!((mass(&body) - 1.0).abs() < 1e-9);
    assert_eq!(body["entropy_trace"].as_array().unwrap().len(), 1);
    assert!(body["selection"]["candidates"].as_array().unwrap().len() >= 2);
}

#[tokio::test]
async fn bad_requests_are_400() {
    let app = app();
    let (s, _) = call(&app, Method::POST, "/sessions", Some(json!({"opening": "  "}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, Method::POST, "/sessions", Some(json!({"text": "hi"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) =
        call(&app, Method::POST, "/sessions", Some(json!({"opening": OPENING, "config": {"k": 0}}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(
        &app,
        Method::POST,
        "/sessions",
        Some(json!({"opening": OPENING, "config": {"kb_path": "/etc"}})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (id, _) = create(&app, json!({})).await;
    let (s, _) =
        call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({"response": ""}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app();
    let (s, _) = call(&app, Method::POST, "/sessions/nope/answer", Some(json!({"response": "x"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::GET, "/sessions/nope/trace", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn golden_conversation() {
    let app = app();
    let (id, first) = create(&app, six_rounds()).await;
    let mut exchanges =
        vec![json!({"request": {"opening": OPENING, "config": six_rounds()}, "status": 201, "body": first})];
    for (turn, answer) in ANSWERS.iter().enumerate() {
        let req = json!({"response": answer, "turn": turn});
        let (status, body) =
            call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(req.clone())).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        assert!((mass(&body) - 1.0).abs() < 1e-9);
        if turn < 5 {
            assert!(body["diagnosis"].is_null());
        } else {
            assert_eq!(body["diagnosis"]["disease_id"], "allergic_rhinitis");
            assert_eq!(body["diagnosis"]["stop_reason"], "max_turns");
            assert_eq!(body["status"], "diagnosed");
        }
        exchanges.push(json!({"request": req, "status": 200, "body": body}));
    }
    let (s, _) =
        call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({"response": "more"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let (s, trace) = call(&app, Method::GET, &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(trace["distribution_history"].as_array().unwrap().len(), 7);
    assert_eq!(trace["selection_reports"].as_array().unwrap().len(), 6);
    fixture("conversation.json", &redact(&Value::Array(exchanges), &id));
    fixture("trace.json", &redact(&trace, &id));
}

#[tokio::test]
async fn trace_after_two_turns() {
    let app = app();
    let (id, _) = create(&app, six_rounds()).await;
    for a in &ANSWERS[..2] {
        let (s, _) =
            call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({"response": a}))).await;
        assert_eq!(s, StatusCode::OK);
    }
    let (_, trace) = call(&app, Method::GET, &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(trace["format"], "patience-transcript/1");
    assert_eq!(trace["distribution_history"].as_array().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn double_answer_same_turn() {
    let app = app();
    let (id, _) = create(&app, six_rounds()).await;
    let uri = format!("/sessions/{id}/answer");
    let req = json!({"response": ANSWERS[0], "turn": 0});
    let (a, b) = tokio::join!(
        call(&app, Method::POST, &uri, Some(req.clone())),
        call(&app, Method::POST, &uri, Some(req.clone()))
    );
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
    let (_, trace) = call(&app, Method::GET, &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(trace["turns"].as_array().unwrap().len(), 1);
}

/// Delegates to a real backend, sleeping in the distribution call and
/// optionally failing it.
struct Wrapped {
    inner: Arc<dyn Backend>,
    delay: Duration,
    fail: AtomicBool,
}

impl Backend for Wrapped {
    fn extract_symptom_text(&self, d: &Dialogue) -> BackendResult<String> {
        self.inner.extract_symptom_text(d)
    }
    fn elicit_distribution(&self, g: &str, d: &Dialogue, c: &[String]) -> BackendResult<RawWeights> {
        std::thread::sleep(self.delay);
        if self.fail.load(Ordering::SeqCst) {
            return Err(BackendError::Unavailable { attempts: 3, last_error: "HTTP 503".into() });
        }
        self.inner.elicit_distribution(g, d, c)
    }
    fn generate_questions(
        &self,
        u: &str,
        d: &Dialogue,
        p: &DiseaseDistribution,
        k: usize,
    ) -> BackendResult<Vec<CandidateQuestion>> {
        self.inner.generate_questions(u, d, p, k)
    }
    fn simulate_responses(
        &self,
        q: &CandidateQuestion,
        d: &Dialogue,
        l: usize,
    ) -> BackendResult<Vec<String>> {
        self.inner.simulate_responses(q, d, l)
    }
    fn elicit_likelihoods(
        &self,
        q: &CandidateQuestion,
        r: &[String],
        d: &DiseaseEntry,
    ) -> BackendResult<Vec<f64>> {
        self.inner.elicit_likelihoods(q, r, d)
    }
    fn elicit_likelihood(&self, r: &str, d: &DiseaseEntry) -> BackendResult<f64> {
        self.inner.elicit_likelihood(r, d)
    }
    fn humanize_question(&self, q: &str) -> BackendResult<String> {
        self.inner.humanize_question(q)
    }
    fn respond_as_patient(&self, p: &PatientProfile, q: &str, d: &Dialogue) -> BackendResult<String> {
        self.inner.respond_as_patient(p, q, d)
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_answer_while_busy_is_409() {
    let app = app_with(ServiceConfig::new(session_config()), |inner| {
        Arc::new(Wrapped { inner, delay: Duration::from_millis(300), fail: AtomicBool::new(false) })
    });
    let (id, _) = create(&app, six_rounds()).await;
    let uri = format!("/sessions/{id}/answer");
    let slow = call(&app, Method::POST, &uri, Some(json!({"response": ANSWERS[0]})));
    let late = async {
        tokio::time::sleep(Duration::from_millis(100)).await;
        call(&app, Method::POST, &uri, Some(json!({"response": ANSWERS[1]}))).await
    };
    let (a, b) = tokio::join!(slow, late);
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(b.0, StatusCode::CONFLICT);
    assert!(b.1["error"].as_str().unwrap().contains("busy"));
}

#[tokio::test]
async fn backend_failure_is_502_and_retryable() {
    let wrapped = Arc::new(Wrapped {
        inner: backend::connect(&session_config().backend).unwrap(),
        delay: Duration::ZERO,
        fail: AtomicBool::new(false),
    });
    let handle = wrapped.clone();
    let app = app_with(ServiceConfig::new(session_config()), move |_| wrapped);
    let (id, _) = create(&app, six_rounds()).await;
    let uri = format!("/sessions/{id}/answer");
    handle.fail.store(true, Ordering::SeqCst);
    let (s, body) = call(&app, Method::POST, &uri, Some(json!({"response": ANSWERS[0], "turn": 0}))).await;
    assert_eq!(s, StatusCode::BAD_GATEWAY, "{body}");
    handle.fail.store(false, Ordering::SeqCst);
    let (s, body) = call(&app, Method::POST, &uri, Some(json!({"response": ANSWERS[0], "turn": 0}))).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["iteration"], 1);
}

#[tokio::test]
async fn idle_sessions_expire_with_410() {
    let mut config = ServiceConfig::new(session_config());
    config.ttl = Duration::from_millis(50);
    let app = app_with(config, |b| b);
    let (id, _) = create(&app, json!({})).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (s, _) =
        call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({"response": "x"}))).await;
    assert_eq!(s, StatusCode::GONE);
    let (s, _) = call(&app, Method::GET, &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(s, StatusCode::GONE);
}

#[tokio::test]
async fn finished_trace_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ServiceConfig::new(session_config());
    config.transcript_dir = Some(dir.path().to_path_buf());
    let first = app_with(config.clone(), |b| b);
    let (id, _) = create(&first, json!({"max_turns": 1})).await;
    let (s, _) =
        call(&first, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({"response": ANSWERS[0]})))
            .await;
    assert_eq!(s, StatusCode::OK);
    let (_, before) = call(&first, Method::GET, &format!("/sessions/{id}/trace"), None).await;
    assert!(dir.path().join(format!("{id}.json")).exists());

    let restarted = app_with(config, |b| b);
    let (s, after) = call(&restarted, Method::GET, &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(after, before);
    let (s, _) = call(&restarted, Method::GET, "/sessions/..%2F..%2Fetc%2Fpasswd/trace", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_preflight_is_allowed() {
    let req = Request::builder()
        .method(Method::OPTIONS)
        .uri("/sessions")
        .header("origin", "http://localhost:5173")
        .header("access-control-request-method", "POST")
        .body(Body::empty())
        .unwrap();
    let resp = app().oneshot(req).await.unwrap();
    assert!(resp.status().is_success());
    assert_eq!(resp.headers()["access-control-allow-origin"], "*");
}
