//! HTTP/JSON labeling service over the active-learning engine.
//!
//! Sessions are durable: every batch and every submitted label set is
//! appended to `sessions/<id>/events.jsonl` before it takes effect, and a
//! restarted server rebuilds each session by replaying its log.

pub mod error;
pub mod events;
pub mod preview;
mod state;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use rarequery_core::protocol::{
    BatchResponse, CreateSessionRequest, CreateSessionResponse, LabelSubmission, ResultsResponse,
    SessionStatus, SCHEMA_VERSION,
};
use serde_json::json;
use tokio::net::TcpListener;

pub use error::ApiError;
pub use state::{SessionHandle, Shared};

#[derive(Clone)]
pub struct AppState(pub Arc<Shared>);

impl AppState {
    /// Opens (or creates) a data directory, replaying any stored sessions.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, ApiError> {
        Ok(Self(Arc::new(Shared::open(data_dir)?)))
    }

    /// Restarts the background runners of unfinished ground-truth sessions.
    pub fn resume(&self) {
        for handle in self.0.sessions() {
            if handle.is_ground_truth() && !handle.is_finished() {
                spawn_runner(handle);
            }
        }
    }
}

fn spawn_runner(handle: Arc<SessionHandle>) {
    tokio::spawn(async move {
        loop {
            let h = handle.clone();
            match tokio::task::spawn_blocking(move || h.step_ground_truth()).await {
                Ok(Ok(true)) => break,
                Ok(Ok(false)) => {}
                Ok(Err(e)) => {
                    tracing::error!(session = %handle.id, error = %e, "ground-truth round failed");
                    handle.fail(e.message);
                    break;
                }
                Err(e) => {
                    handle.fail(format!("runner panicked: {e}"));
                    break;
                }
            }
        }
        tracing::info!(session = %handle.id, "ground-truth session finished");
    });
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn bad_json(rejection: JsonRejection) -> ApiError {
    ApiError::unprocessable(rejection.body_text())
}

async fn create_session(
    State(state): State<AppState>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let Json(req) = body.map_err(bad_json)?;
    let shared = state.0.clone();
    let (handle, created) = blocking(move || shared.create_session(req)).await?;
    if created && handle.is_ground_truth() {
        spawn_runner(handle.clone());
    }
    let code = if created {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    Ok((
        code,
        Json(CreateSessionResponse {
            schema_version: SCHEMA_VERSION,
            session_id: handle.id.clone(),
            status: handle.status(),
        }),
    ))
}

async fn list_sessions(State(state): State<AppState>) -> Json<serde_json::Value> {
    let sessions: Vec<SessionStatus> = state.0.sessions().iter().map(|h| h.status()).collect();
    Json(json!({ "schema_version": SCHEMA_VERSION, "sessions": sessions }))
}

async fn list_tilesets(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "schema_version": SCHEMA_VERSION, "tilesets": state.0.tileset_names() }))
}

async fn session_status(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionStatus>, ApiError> {
    let handle = state.0.session(&id)?;
    Ok(Json(blocking(move || Ok(handle.status())).await?))
}

async fn next_batch(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<BatchResponse>, ApiError> {
    let handle = state.0.session(&id)?;
    Ok(Json(blocking(move || handle.batch()).await?))
}

async fn submit_labels(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<LabelSubmission>, JsonRejection>,
) -> Result<Json<SessionStatus>, ApiError> {
    let handle = state.0.session(&id)?;
    let Json(submission) = body.map_err(bad_json)?;
    Ok(Json(blocking(move || handle.submit(&submission)).await?))
}

async fn results(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<ResultsResponse>, ApiError> {
    let handle = state.0.session(&id)?;
    Ok(Json(blocking(move || Ok(handle.results())).await?))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "schema_version": SCHEMA_VERSION, "status": "ok" }))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/tilesets", get(list_tilesets))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_status))
        .route("/sessions/{id}/batch", get(next_batch))
        .route("/sessions/{id}/labels", post(submit_labels))
        .route("/sessions/{id}/results", get(results))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(data_dir: impl Into<PathBuf>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    serve_on(data_dir, listener).await
}

pub async fn serve_on(data_dir: impl Into<PathBuf>, listener: TcpListener) -> std::io::Result<()> {
    let data_dir = data_dir.into();
    let state = tokio::task::spawn_blocking(move || AppState::open(data_dir))
        .await
        .map_err(std::io::Error::other)?
        .map_err(std::io::Error::other)?;
    state.resume();
    axum::serve(listener, router(state)).await
}

/// Starts a server on an ephemeral localhost port in the background.
pub async fn spawn(data_dir: impl Into<PathBuf>) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    let data_dir = data_dir.into();
    let state = tokio::task::spawn_blocking(move || AppState::open(data_dir))
        .await
        .map_err(std::io::Error::other)?
        .map_err(std::io::Error::other)?;
    state.resume();
    tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, router(state)).await {
            tracing::error!(error = %e, "server stopped");
        }
    });
    Ok(addr)
}
