//! HTTP API over an in-memory snapshot.
//!
//! Readers clone the current `Arc<Snapshot>` and never see a partial load;
//! `POST /api/reload` builds a new snapshot first and swaps it in only on
//! success.

use std::sync::{Arc, RwLock};

use axum::extract::{Path, RawQuery, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;

use crate::query::{to_json, QueryError, QueryFilter, Snapshot, Sources};

#[derive(Clone)]
pub struct AppState {
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
    sources: Option<Sources>,
}

impl AppState {
    /// State that can reload itself from `sources`.
    pub fn new(snapshot: Snapshot, sources: Option<Sources>) -> Self {
        Self {
            snapshot: Arc::new(RwLock::new(Arc::new(snapshot))),
            sources,
        }
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
    path: String,
    detail: String,
}

fn json(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(status: StatusCode, error: &str, path: &str, detail: impl Into<String>) -> Response {
    let body = ErrorBody {
        error: error.into(),
        path: path.into(),
        detail: detail.into(),
    };
    json(status, to_json(&body))
}

impl IntoResponse for QueryError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::BAD_REQUEST);
        json(status, to_json(&self))
    }
}

type ApiResult = Result<Response, QueryError>;

fn pairs(query: &Option<String>) -> Vec<(std::borrow::Cow<'_, str>, std::borrow::Cow<'_, str>)> {
    query
        .as_deref()
        .map(|q| url::form_urlencoded::parse(q.as_bytes()).collect())
        .unwrap_or_default()
}

/// Runs CPU-bound scoring off the async workers.
async fn blocking<F>(f: F) -> Response
where
    F: FnOnce() -> ApiResult + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(r)) => r,
        Ok(Err(e)) => e.into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", "", e.to_string()),
    }
}

async fn protocol(State(state): State<AppState>) -> Response {
    json(StatusCode::OK, to_json(&state.current().summary()))
}

async fn patients(State(state): State<AppState>, RawQuery(q): RawQuery) -> Response {
    let run = || -> ApiResult {
        let mut wards = Vec::new();
        for (k, v) in pairs(&q) {
            match k.as_ref() {
                "ward" => wards.push(v.into_owned()),
                other => return Err(QueryError::bad_filter(other, format!("unknown parameter `{other}`"))),
            }
        }
        Ok(json(StatusCode::OK, to_json(&state.current().patients(&wards)?)))
    };
    run().unwrap_or_else(IntoResponse::into_response)
}

async fn scores(State(state): State<AppState>, RawQuery(q): RawQuery) -> Response {
    let snap = state.current();
    blocking(move || {
        let filter = QueryFilter::from_pairs(pairs(&q), "", &[])?;
        Ok(json(StatusCode::OK, to_json(&snap.score(&filter)?)))
    })
    .await
}

async fn patient_tree(State(state): State<AppState>, Path(patient_id): Path<String>, RawQuery(q): RawQuery) -> Response {
    let snap = state.current();
    blocking(move || {
        let filter = QueryFilter::from_pairs(pairs(&q), "", &[])?;
        if !filter.patients.is_empty() || !filter.wards.is_empty() {
            return Err(QueryError::bad_filter("patient", "population filters do not apply to a single patient"));
        }
        Ok(json(StatusCode::OK, to_json(&snap.patient_tree(&patient_id, &filter)?)))
    })
    .await
}

async fn compare(State(state): State<AppState>, RawQuery(q): RawQuery) -> Response {
    let snap = state.current();
    blocking(move || {
        let all = pairs(&q);
        let a = QueryFilter::from_pairs(all.clone(), "frameA_", &["frameB_from", "frameB_to"])?;
        let b = QueryFilter::from_pairs(all, "frameB_", &["frameA_from", "frameA_to"])?;
        Ok(json(StatusCode::OK, to_json(&snap.compare(&a, &b)?)))
    })
    .await
}

#[derive(Serialize)]
struct Reloaded {
    patients: usize,
    events: usize,
    duplicates_dropped: usize,
}

async fn reload(State(state): State<AppState>) -> Response {
    let Some(sources) = state.sources.clone() else {
        return error(StatusCode::CONFLICT, "NoSources", "", "snapshot was not loaded from files");
    };
    let loaded = tokio::task::spawn_blocking(move || Snapshot::load(&sources)).await;
    match loaded {
        Ok(Ok(snap)) => {
            let body = Reloaded {
                patients: snap.cohort.patients.len(),
                events: snap.report.events,
                duplicates_dropped: snap.report.duplicates_dropped,
            };
            *state.snapshot.write().expect("snapshot lock poisoned") = Arc::new(snap);
            json(StatusCode::OK, to_json(&body))
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, &e.kind(), "", e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "InternalError", "", e.to_string()),
    }
}

async fn not_found(uri: Uri) -> Response {
    error(StatusCode::NOT_FOUND, "NotFound", uri.path(), "no such endpoint")
}

async fn wrong_method(uri: Uri) -> Response {
    error(StatusCode::METHOD_NOT_ALLOWED, "MethodNotAllowed", uri.path(), "method not supported here")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/protocol", get(protocol))
        .route("/api/patients", get(patients))
        .route("/api/scores", get(scores))
        .route("/api/scores/{patient_id}/tree", get(patient_tree))
        .route("/api/compare", get(compare))
        .route("/api/reload", post(reload))
        .fallback(not_found)
        .method_not_allowed_fallback(wrong_method)
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
