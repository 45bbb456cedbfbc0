use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use metamem::Config;
use metamem_cli::service::{self, AppState, FeedbackResponse, MemoryView, QueryResponse};
use metamem_cli::setup;
use serde_json::{json, Value};
use tower::ServiceExt;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/fixtures/tooheys.json");
const QUERY: &str =
    "The 1995 Tooheys 1000 driver who has second-to-last in the Tooheys Top 10 was born where?";

fn state(cfg: Config) -> Arc<AppState> {
    AppState::new(setup::engine(cfg, None, Some(Path::new(FIXTURE))).unwrap())
}

async fn call(
    state: &Arc<AppState>,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = service::router(state.clone())
        .oneshot(req.body(body).unwrap())
        .await
        .unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

#[tokio::test]
async fn query_returns_answer_and_trace() {
    let s = state(Config::default());
    let (status, body) = call(&s, Method::POST, "/v1/query", Some(json!({ "query": QUERY }))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: QueryResponse = serde_json::from_value(body).unwrap();
    assert!(resp.answer.unwrap().contains("Sydney"));

    let (status, trace) = call(&s, Method::GET, &format!("/v1/trace/{}", resp.trace_id), None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(!trace["records"].as_array().unwrap().is_empty());
}

#[tokio::test]
async fn depth_zero_reports_failure_with_trace() {
    let s = state(Config::default());
    let (status, body) = call(
        &s,
        Method::POST,
        "/v1/query",
        Some(json!({ "query": QUERY, "max_depth": 0 })),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let resp: QueryResponse = serde_json::from_value(body).unwrap();
    assert!(resp.answer.is_none());
    assert!(resp.failure.unwrap().message.contains("depth"));
}

#[tokio::test]
async fn memory_crud_round_trip() {
    let s = state(Config::default());
    let (status, created) = call(
        &s,
        Method::POST,
        "/v1/memory",
        Some(json!({ "context": "capital of Peru", "value": "Lima" })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let created: MemoryView = serde_json::from_value(created).unwrap();
    assert_eq!(created.score, 0.5);

    let uri = format!("/v1/memory/{}", created.id);
    let (status, got) = call(&s, Method::GET, &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_value::<MemoryView>(got).unwrap(), created);

    let (status, patched) = call(&s, Method::PATCH, &uri, Some(json!({ "value": "Lima, on the coast" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(patched["value"], "Lima, on the coast");
    assert_eq!(patched["context"], "capital of Peru");

    let (status, listed) = call(&s, Method::GET, "/v1/memory?filter=value%20CONTAINS%20%22coast%22", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(listed.as_array().unwrap().len(), 1);

    let (status, _) = call(&s, Method::DELETE, &uri, None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, err) = call(&s, Method::GET, &uri, None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "not_found");
}

#[tokio::test]
async fn list_is_ordered_and_limited() {
    let s = state(Config::default());
    let (_, all) = call(&s, Method::GET, "/v1/memory", None).await;
    let all: Vec<MemoryView> = serde_json::from_value(all).unwrap();
    assert!(all.len() >= 2);
    assert!(all.windows(2).all(|w| w[0].score >= w[1].score));
    let (_, one) = call(&s, Method::GET, "/v1/memory?k=1", None).await;
    assert_eq!(one.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn feedback_moves_credited_scores_by_eta_times_weight() {
    let s = state(Config::default());
    let (_, body) = call(&s, Method::POST, "/v1/query", Some(json!({ "query": QUERY }))).await;
    let resp: QueryResponse = serde_json::from_value(body).unwrap();
    let (status, body) = call(
        &s,
        Method::POST,
        "/v1/feedback",
        Some(json!({ "trace_id": resp.trace_id, "payoff": -1.0 })),
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let fb: FeedbackResponse = serde_json::from_value(body).unwrap();
    assert!(!fb.changes.is_empty());
    let eta = Config::default().eta;
    for c in &fb.changes {
        let expected = (c.before + eta * c.payoff).clamp(0.0, 1.0);
        assert!((c.after - expected).abs() < 1e-12, "{c:?}");
        let (_, got) = call(&s, Method::GET, &format!("/v1/memory/{}", c.id), None).await;
        assert!((got["score"].as_f64().unwrap() - c.after).abs() < 1e-12);
    }
}

#[tokio::test]
async fn unknown_trace_is_not_found() {
    let s = state(Config::default());
    let (status, _) = call(&s, Method::GET, "/v1/trace/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, err) = call(
        &s,
        Method::POST,
        "/v1/feedback",
        Some(json!({ "trace_id": "nope", "payoff": 1.0 })),
    )
    .await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["error"]["code"], "not_found");
}

#[tokio::test]
async fn bad_requests_use_error_shape() {
    let s = state(Config::default());
    let (status, err) = call(&s, Method::GET, "/v1/memory?filter=context%20LIKE%20x", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["error"]["code"], "invalid_filter");

    let (status, err) = call(&s, Method::POST, "/v1/memory", Some(json!({ "context": 3 }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{err}");
    assert!(err["error"]["message"].is_string());

    let (status, err) = call(&s, Method::GET, "/v1/memory/abc", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"]["code"].is_string());

    let (status, _) = call(&s, Method::GET, "/v2/nothing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, _) = call(
        &s,
        Method::POST,
        "/v1/feedback",
        Some(json!({ "trace_id": "x", "payoff": 3.0 })),
    )
    .await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn token_is_required_when_configured() {
    let s = state(Config {
        auth_token: Some("sesame".into()),
        ..Config::default()
    });
    let (status, err) = call(&s, Method::GET, "/v1/memory", None).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    assert_eq!(err["error"]["code"], "unauthorized");

    let req = Request::get("/v1/memory")
        .header(service::AUTH_HEADER, "sesame")
        .body(Body::empty())
        .unwrap();
    let resp = service::router(s.clone()).oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
}

#[tokio::test]
async fn events_stream_records_of_a_run() {
    let s = state(Config::default());
    let resp = service::router(s.clone())
        .oneshot(Request::get("/v1/events").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();

    let (_, q) = call(&s, Method::POST, "/v1/query", Some(json!({ "query": QUERY }))).await;
    let frame = body.frame().await.unwrap().unwrap();
    let text = String::from_utf8(frame.into_data().unwrap().to_vec()).unwrap();
    assert!(text.starts_with("event: record"), "{text}");
    assert!(text.contains(q["trace_id"].as_str().unwrap()));
}
