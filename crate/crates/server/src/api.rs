//! HTTP routes over a [`Registry`].

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::registry::Registry;
use crate::snapshot::{ApiError, EntitiesRequest, ModelSnapshot, SearchRequest};

#[derive(Clone, Default)]
pub struct AppState {
    pub registry: Arc<Registry>,
    published: Arc<AtomicUsize>,
}

impl AppState {
    pub fn new(registry: Arc<Registry>) -> Self {
        AppState {
            registry,
            published: Arc::default(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(t)| t)
        .map_err(|e| ApiError::new(e.status().as_u16(), "invalid_request", e.body_text()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(500, "internal", e.to_string()))?
}

async fn health(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "snapshots": st.registry.len() }))
}

async fn models(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::to_value(st.registry.list()).expect("serializable"))
}

async fn search(State(st): State<AppState>, payload: Result<Json<SearchRequest>, JsonRejection>) -> Response {
    let run = async {
        let req = body(payload)?;
        let snap = st.registry.get(req.model.as_deref())?;
        blocking(move || snap.search(&req)).await
    };
    match run.await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn entities(State(st): State<AppState>, payload: Result<Json<EntitiesRequest>, JsonRejection>) -> Response {
    let run = async {
        let req = body(payload)?;
        let snap = st.registry.get(req.model.as_deref())?;
        snap.entities(&req)
    };
    match run.await {
        Ok(r) => Json(r).into_response(),
        Err(e) => e.into_response(),
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
pub struct PublishRequest {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub features: PathBuf,
    #[serde(default)]
    pub id: Option<String>,
}

async fn publish(State(st): State<AppState>, payload: Result<Json<PublishRequest>, JsonRejection>) -> Response {
    let run = async {
        let req = body(payload)?;
        let id = req
            .id
            .clone()
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| format!("snap-{}", st.published.fetch_add(1, Ordering::SeqCst) + 1));
        let snap = blocking(move || {
            ModelSnapshot::load(&id, &req.checkpoint, &req.corpus, &req.features)
                .map_err(|e| ApiError::bad_request("publish_failed", e.to_string()))
        })
        .await?;
        let info = snap.info();
        st.registry.publish(snap);
        log::info!("published snapshot {}", info.id);
        Ok::<_, ApiError>(info)
    };
    match run.await {
        Ok(info) => Json(json!({ "snapshot": info.id, "model": info })).into_response(),
        Err(e) => e.into_response(),
    }
}

async fn not_found() -> ApiError {
    ApiError::new(404, "not_found", "no such route")
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/models", get(models))
        .route("/search", post(search))
        .route("/entities", post(entities))
        .route("/admin/publish", post(publish))
        .fallback(not_found)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
