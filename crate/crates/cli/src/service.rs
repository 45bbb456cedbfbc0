//! The `/v1` HTTP API.
//!
//! | method | path | body / query |
//! |--------|------|--------------|
//! | POST | `/v1/query` | `{query, max_depth?}` |
//! | GET | `/v1/memory` | `?filter=<expr>&k=<n>` |
//! | POST | `/v1/memory` | `{context, value}` |
//! | GET, PATCH, DELETE | `/v1/memory/{id}` | PATCH: `{context?, value?}` |
//! | POST | `/v1/feedback` | `{trace_id, payoff}` |
//! | GET | `/v1/trace/{id}` | |
//! | GET | `/v1/events` | server-sent events, `?trace_id=` to filter |
//!
//! Errors are `{"error": {"code", "message"}}`.

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{FromRequest, FromRequestParts, Path, Request, State};
use axum::http::StatusCode;
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use metamem::engine::{FailureReport, ScoreChange, Trace, TraceRecord};
use metamem::{Engine, Error, FilterExpr, KnowledgeId, KnowledgeTriple, RunOptions};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;

pub const TRACE_HISTORY: usize = 100;

pub const AUTH_HEADER: &str = "x-auth-token";

#[derive(Debug, Clone, Serialize)]
pub struct TraceEvent {
    pub trace_id: String,
    pub record: TraceRecord,
}

pub struct AppState {
    engine: Engine,
    traces: Mutex<VecDeque<Arc<Trace>>>,
    events: broadcast::Sender<TraceEvent>,
    auth_token: Option<String>,
}

impl AppState {
    pub fn new(engine: Engine) -> Arc<Self> {
        let auth_token = engine.config().auth_token.clone();
        Arc::new(Self {
            engine,
            traces: Mutex::new(VecDeque::with_capacity(TRACE_HISTORY)),
            events: broadcast::channel(1024).0,
            auth_token,
        })
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    fn remember(&self, trace: Trace) {
        let mut traces = self.traces.lock().unwrap_or_else(|e| e.into_inner());
        if traces.len() == TRACE_HISTORY {
            traces.pop_front();
        }
        traces.push_back(Arc::new(trace));
    }

    fn trace(&self, id: &str) -> Option<Arc<Trace>> {
        let traces = self.traces.lock().unwrap_or_else(|e| e.into_inner());
        traces.iter().rev().find(|t| t.trace_id == id).cloned()
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            Error::Filter { .. } => (StatusCode::BAD_REQUEST, "invalid_filter"),
            Error::Domain(_) | Error::Schema(_) | Error::CommandParse(_) => {
                (StatusCode::BAD_REQUEST, "invalid_request")
            }
            Error::Backend(_) | Error::Fetch { .. } => (StatusCode::BAD_GATEWAY, "upstream_error"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), "invalid_request", r.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(r: QueryRejection) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", r.body_text())
    }
}

/// JSON body whose rejections use the API error shape.
#[derive(FromRequest)]
#[from_request(via(axum::Json), rejection(ApiError))]
struct Body<T>(T);

#[derive(FromRequestParts)]
#[from_request(via(axum::extract::Query), rejection(ApiError))]
struct Params<T>(T);

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, Error> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

/// A memory record without its credibility matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryView {
    pub id: KnowledgeId,
    pub context: String,
    pub value: String,
    pub score: f64,
    pub selections: u64,
    pub created_step: u64,
    pub updated_step: u64,
}

impl From<&KnowledgeTriple> for MemoryView {
    fn from(t: &KnowledgeTriple) -> Self {
        Self {
            id: t.id,
            context: t.context.clone(),
            value: t.value.clone(),
            score: t.cred.score(),
            selections: t.cred.selections(),
            created_step: t.created_step,
            updated_step: t.updated_step,
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct QueryRequest {
    pub query: String,
    pub max_depth: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QueryResponse {
    pub trace_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<FailureView>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FailureView {
    pub message: String,
    pub report: FailureReport,
}

async fn query(
    State(state): State<Arc<AppState>>,
    Body(req): Body<QueryRequest>,
) -> ApiResult<Json<QueryResponse>> {
    let worker = state.clone();
    let run = blocking(move || {
        let events = worker.events.clone();
        worker.engine.run_with_events(
            &req.query,
            RunOptions {
                max_depth: req.max_depth,
            },
            &mut |trace_id, record| {
                // no subscribers is fine
                let _ = events.send(TraceEvent {
                    trace_id: trace_id.to_string(),
                    record: record.clone(),
                });
            },
        )
    })
    .await?;
    let trace_id = run.trace.trace_id.clone();
    state.remember(run.trace);
    let (answer, failure) = match run.answer {
        Ok(a) => (Some(a), None),
        Err(f) => (
            None,
            Some(FailureView {
                message: f.to_string(),
                report: f,
            }),
        ),
    };
    Ok(Json(QueryResponse {
        trace_id,
        answer,
        failure,
    }))
}

#[derive(Debug, Deserialize)]
pub struct MemoryQuery {
    pub filter: Option<String>,
    pub k: Option<usize>,
}

/// Records by credibility score, highest first, ties to the smaller id.
async fn list_memory(
    State(state): State<Arc<AppState>>,
    Params(q): Params<MemoryQuery>,
) -> ApiResult<Json<Vec<MemoryView>>> {
    let store = state.engine.store();
    let mut records = match q.filter.as_deref().filter(|f| !f.trim().is_empty()) {
        Some(f) => store.keyword_search(&FilterExpr::parse(f)?),
        None => store.list(),
    };
    records.sort_by(|a, b| {
        b.cred
            .score()
            .total_cmp(&a.cred.score())
            .then(a.id.cmp(&b.id))
    });
    let k = q.k.unwrap_or(usize::MAX);
    Ok(Json(records.iter().take(k).map(MemoryView::from).collect()))
}

#[derive(Debug, Deserialize)]
pub struct CreateMemory {
    pub context: String,
    pub value: String,
}

async fn create_memory(
    State(state): State<Arc<AppState>>,
    Body(req): Body<CreateMemory>,
) -> ApiResult<(StatusCode, Json<MemoryView>)> {
    let store = state.engine.store();
    let id = store.create(&req.context, &req.value)?;
    Ok((StatusCode::CREATED, Json(MemoryView::from(&store.get(id)?))))
}

fn parse_id(raw: &str) -> ApiResult<KnowledgeId> {
    raw.parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", format!("bad id `{raw}`")))
}

async fn get_memory(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<MemoryView>> {
    let id = parse_id(&id)?;
    Ok(Json(MemoryView::from(&state.engine.store().get(id)?)))
}

#[derive(Debug, Deserialize)]
pub struct PatchMemory {
    pub context: Option<String>,
    pub value: Option<String>,
}

async fn patch_memory(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Body(req): Body<PatchMemory>,
) -> ApiResult<Json<MemoryView>> {
    let id = parse_id(&id)?;
    let store = state.engine.store();
    store.update(id, req.context.as_deref(), req.value.as_deref())?;
    Ok(Json(MemoryView::from(&store.get(id)?)))
}

async fn delete_memory(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    state.engine.store().delete(parse_id(&id)?)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
pub struct FeedbackRequest {
    pub trace_id: String,
    pub payoff: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub changes: Vec<ScoreChange>,
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    Body(req): Body<FeedbackRequest>,
) -> ApiResult<Json<FeedbackResponse>> {
    let trace = state.trace(&req.trace_id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("trace {} not found", req.trace_id),
        )
    })?;
    let worker = state.clone();
    let changes = blocking(move || worker.engine.feedback(&trace, req.payoff)).await?;
    Ok(Json(FeedbackResponse { changes }))
}

async fn get_trace(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Trace>> {
    state
        .trace(&id)
        .map(|t| Json(Trace::clone(&t)))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("trace {id} not found")))
}

#[derive(Debug, Deserialize)]
pub struct EventsQuery {
    pub trace_id: Option<String>,
}

async fn events(
    State(state): State<Arc<AppState>>,
    Params(q): Params<EventsQuery>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = state.events.subscribe();
    let stream = futures::stream::unfold((rx, q.trace_id), |(mut rx, only)| async move {
        loop {
            match rx.recv().await {
                Ok(ev) if only.as_ref().is_some_and(|id| *id != ev.trace_id) => continue,
                Ok(ev) => {
                    let event = Event::default()
                        .event("record")
                        .json_data(&ev)
                        .unwrap_or_else(|_| Event::default().event("error"));
                    return Some((Ok(event), (rx, only)));
                }
                Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.auth_token {
        let given = req.headers().get(AUTH_HEADER).and_then(|v| v.to_str().ok());
        if given != Some(token.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong auth token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/query", post(query))
        .route("/v1/memory", get(list_memory).post(create_memory))
        .route(
            "/v1/memory/{id}",
            get(get_memory).patch(patch_memory).delete(delete_memory),
        )
        .route("/v1/feedback", post(feedback))
        .route("/v1/trace/{id}", get(get_trace))
        .route("/v1/events", get(events))
        .fallback(not_found)
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, addr: &str) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| anyhow::anyhow!("cannot listen on {addr}: {e}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
