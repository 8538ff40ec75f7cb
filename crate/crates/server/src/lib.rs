//! HTTP review service over a shared [`ReviewStore`].
//!
//! Routes:
//! - `GET  /runs`
//! - `GET  /runs/{id}`
//! - `GET  /runs/{id}/reviews/pending`
//! - `POST /runs/{id}/reviews/{item}/decision`
//! - `GET  /runs/{id}/trace/{iteration}`

use std::net::SocketAddr;
use std::path::PathBuf;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use confloop::review::{ReviewStore, SubmitError, Verdict};
use serde_json::json;
use tokio::net::TcpListener;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;
use tracing::info;

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn not_found(what: String) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("{what} not found"))
}

async fn list_runs(State(store): State<ReviewStore>) -> impl IntoResponse {
    Json(store.list_runs())
}

async fn get_run(State(store): State<ReviewStore>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let report = store.report(&id).ok_or_else(|| not_found(format!("run {id}")))?;
    Ok(Json(json!({
        "run_id": id,
        "status": store.status(&id),
        "report": report,
        "reviews": store.items(&id).unwrap_or_default(),
    })))
}

async fn pending(State(store): State<ReviewStore>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    store.pending(&id).map(Json).ok_or_else(|| not_found(format!("run {id}")))
}

async fn decide(
    State(store): State<ReviewStore>,
    Path((id, item)): Path<(String, String)>,
    body: Result<Json<Verdict>, JsonRejection>,
) -> Result<impl IntoResponse, ApiError> {
    let Json(verdict) = body.map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()))?;
    match store.submit(&id, &item, verdict) {
        Ok(decided) => {
            info!(run_id = %id, item_id = %item, "decision recorded");
            Ok(Json(decided))
        }
        Err(e @ SubmitError::NotFound(_)) => Err(ApiError(StatusCode::NOT_FOUND, e.to_string())),
        Err(e @ SubmitError::Conflict(_)) => Err(ApiError(StatusCode::CONFLICT, e.to_string())),
        Err(e @ SubmitError::Invalid(_)) => Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
    }
}

async fn trace(
    State(store): State<ReviewStore>,
    Path((id, iteration)): Path<(String, usize)>,
) -> Result<impl IntoResponse, ApiError> {
    if store.status(&id).is_none() {
        return Err(not_found(format!("run {id}")));
    }
    store.traces(&id, iteration).map(Json).ok_or_else(|| not_found(format!("trace for iteration {iteration}")))
}

/// The API router, with static UI assets under `/` when `ui_dir` is given.
pub fn router(store: ReviewStore, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/reviews/pending", get(pending))
        .route("/runs/{id}/reviews/{item}/decision", post(decide))
        .route("/runs/{id}/trace/{iteration}", get(trace))
        .with_state(store);
    let app = match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

/// A running service; dropping the handle does not stop it, call [`ServiceHandle::shutdown`].
pub struct ServiceHandle {
    pub addr: SocketAddr,
    stop: oneshot::Sender<()>,
    task: JoinHandle<std::io::Result<()>>,
}

impl ServiceHandle {
    /// Stops accepting connections and waits for in-flight requests.
    pub async fn shutdown(self) -> std::io::Result<()> {
        let _ = self.stop.send(());
        self.task.await.map_err(std::io::Error::other)?
    }
}

/// Binds `bind` and serves the review API until shut down.
pub async fn serve_review_api(store: ReviewStore, bind: SocketAddr, ui_dir: Option<PathBuf>) -> std::io::Result<ServiceHandle> {
    let listener = TcpListener::bind(bind).await?;
    let addr = listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let app = router(store, ui_dir);
    let task = tokio::spawn(async move {
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = stopped.await;
            })
            .await
    });
    info!(%addr, "review API listening");
    Ok(ServiceHandle { addr, stop, task })
}
