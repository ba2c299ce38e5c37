//! JSON routes, mounted under both `/api` and `/api/v1`. Every response
//! body carries `api_version`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::RwLock;
use tower_http::services::ServeDir;

use wpnmine::pipeline::API_VERSION;

use crate::session::{ClusterFilter, TriageError, TriageSession, VerdictRequest};

pub type Shared = Arc<RwLock<TriageSession>>;

pub const DEFAULT_PAGE_SIZE: usize = 10;

#[derive(Serialize)]
struct Envelope<T: Serialize> {
    api_version: &'static str,
    #[serde(flatten)]
    body: T,
}

fn ok<T: Serialize>(body: T) -> Response {
    Json(Envelope {
        api_version: API_VERSION,
        body,
    })
    .into_response()
}

impl IntoResponse for TriageError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self {
            TriageError::BadRequest(_) => (StatusCode::BAD_REQUEST, "bad_request"),
            TriageError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            TriageError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            TriageError::Core(wpnmine::Error::Url { .. }) => (StatusCode::BAD_REQUEST, "bad_request"),
            TriageError::Core(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = json!({ "api_version": API_VERSION, "error": kind, "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}

#[derive(Deserialize)]
struct ListQuery {
    label: Option<String>,
    page: Option<usize>,
    page_size: Option<usize>,
}

async fn list_clusters(State(s): State<Shared>, Query(q): Query<ListQuery>) -> Result<Response, TriageError> {
    let filter: ClusterFilter = q.label.as_deref().unwrap_or("all").parse()?;
    let session = s.read().await;
    let page = session.list_clusters(filter, q.page.unwrap_or(1), q.page_size.unwrap_or(DEFAULT_PAGE_SIZE))?;
    Ok(ok(page))
}

fn parse_id(raw: &str, what: &str) -> Result<usize, TriageError> {
    raw.parse()
        .map_err(|_| TriageError::NotFound(format!("no {what} `{raw}`")))
}

async fn get_cluster(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, TriageError> {
    let id = parse_id(&id, "cluster")?;
    Ok(ok(s.read().await.cluster_detail(id)?))
}

async fn get_metacluster(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, TriageError> {
    let id = parse_id(&id, "meta-cluster")?;
    Ok(ok(s.read().await.metacluster_detail(id)?))
}

/// Takes raw JSON so schema errors come back as 400 with our envelope.
async fn post_verdict(State(s): State<Shared>, body: Option<Json<Value>>) -> Result<Response, TriageError> {
    let Some(Json(mut body)) = body else {
        return Err(TriageError::BadRequest("expected a JSON body".into()));
    };
    // Accept numeric ids for clusters.
    if let Some(n) = body.get("target_id").and_then(Value::as_u64) {
        body["target_id"] = Value::String(n.to_string());
    }
    let req: VerdictRequest =
        serde_json::from_value(body).map_err(|e| TriageError::BadRequest(format!("bad verdict request: {e}")))?;
    let entry = s.write().await.submit_verdict(req)?;
    Ok((StatusCode::CREATED, ok(entry)).into_response())
}

/// Labels are derived from a snapshot outside the write lock and swapped
/// in afterwards, so readers are never blocked by the computation.
async fn post_recompute(State(s): State<Shared>) -> Result<Response, TriageError> {
    let (artifacts, journal) = s.read().await.snapshot();
    let head = journal.len();
    let labeling = tokio::task::spawn_blocking(move || crate::session::replay(&artifacts, &journal))
        .await
        .map_err(|e| TriageError::Conflict(format!("recompute aborted: {e}")))?;
    let mut session = s.write().await;
    if session.consumed_head() > head {
        return Err(TriageError::Conflict("a newer recompute already finished".into()));
    }
    Ok(ok(session.install(head, labeling)))
}

async fn get_report(State(s): State<Shared>) -> Response {
    ok(s.read().await.report())
}

async fn get_journal(State(s): State<Shared>) -> Response {
    ok(json!({ "entries": s.read().await.journal() }))
}

fn routes() -> Router<Shared> {
    Router::new()
        .route("/clusters", get(list_clusters))
        .route("/clusters/{id}", get(get_cluster))
        .route("/metaclusters/{id}", get(get_metacluster))
        .route("/verdicts", post(post_verdict))
        .route("/journal", get(get_journal))
        .route("/recompute", post(post_recompute))
        .route("/report", get(get_report))
}

/// The API, plus the UI bundle from `static_dir` at `/` when given.
pub fn router(state: Shared, static_dir: Option<PathBuf>) -> Router {
    let app = Router::new()
        .nest("/api/v1", routes())
        .nest("/api", routes())
        .with_state(state);
    match static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    }
}

pub async fn serve(state: Shared, addr: std::net::SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state, static_dir)).await
}
