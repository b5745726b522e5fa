//! HTTP retrieval service over an immutable model and gallery index.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use smup_core::image::{ImageTensor, Modality};
use smup_core::model::Model;
use smup_core::retrieval::RetrievalIndex;

pub const DEFAULT_K: usize = 10;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrieveRequest {
    /// Base64 PNG, optionally as a `data:` URL.
    pub image: String,
    #[serde(default)]
    pub k: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieveHit {
    pub photo_id: String,
    pub distance: f64,
    pub thumbnail_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<RetrieveHit>,
    pub model_version: String,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: String,
    pub gallery_size: usize,
}

/// Failure with the HTTP status it maps to.
#[derive(Clone, Debug, PartialEq)]
pub struct ApiError {
    pub status: StatusCode,
    pub reason: String,
}

impl ApiError {
    fn bad_request(reason: impl Into<String>) -> Self {
        Self { status: StatusCode::BAD_REQUEST, reason: reason.into() }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.reason }))).into_response()
    }
}

/// What the service answers from. Never mutated after startup.
pub struct Loaded {
    pub model: Model,
    pub index: RetrievalIndex,
    pub model_version: String,
    /// Photo files by id, for thumbnails.
    pub photos: HashMap<String, PathBuf>,
}

#[derive(Clone, Default)]
pub struct AppState {
    pub loaded: Option<Arc<Loaded>>,
}

impl AppState {
    pub fn new(loaded: Loaded) -> Self {
        Self { loaded: Some(Arc::new(loaded)) }
    }
}

fn decode_image(text: &str, size: usize) -> Result<ImageTensor, ApiError> {
    let payload = match text.split_once(";base64,") {
        Some((prefix, rest)) if prefix.starts_with("data:") => rest,
        _ => text,
    };
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| ApiError::bad_request(format!("invalid base64: {e}")))?;
    ImageTensor::from_encoded(&bytes, size, Modality::Sketch).map_err(|e| ApiError::bad_request(format!("invalid image: {e}")))
}

/// Embeds the query sketch with FT inactive and returns the `k` nearest gallery photos.
pub fn handle_retrieve(state: &AppState, req: &RetrieveRequest) -> Result<RetrieveResponse, ApiError> {
    let start = Instant::now();
    let loaded = state
        .loaded
        .as_ref()
        .ok_or_else(|| ApiError { status: StatusCode::SERVICE_UNAVAILABLE, reason: "model and index not loaded".into() })?;
    let n = loaded.index.len();
    let k = req.k.unwrap_or(DEFAULT_K.min(n));
    if k == 0 || k > n {
        return Err(ApiError::bad_request(format!("k must lie in 1..={n}, got {k}")));
    }
    let img = decode_image(&req.image, loaded.model.arch.config.image_size)?;
    let emb = loaded.model.embed(&[&img]).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let hits = loaded.index.query(&emb[0], k).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let results = hits
        .into_iter()
        .map(|h| {
            let id = loaded.index.ids[h.row].clone();
            RetrieveHit { thumbnail_url: format!("/api/photo/{id}"), photo_id: id, distance: h.distance }
        })
        .collect();
    Ok(RetrieveResponse {
        results,
        model_version: loaded.model_version.clone(),
        latency_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

pub fn health(state: &AppState) -> Health {
    match &state.loaded {
        Some(l) => Health { status: "ok".into(), model_version: l.model_version.clone(), gallery_size: l.index.len() },
        None => Health { status: "uninitialized".into(), model_version: String::new(), gallery_size: 0 },
    }
}

async fn retrieve_route(State(state): State<AppState>, body: Bytes) -> Response {
    let req: RetrieveRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return ApiError::bad_request(format!("malformed request: {e}")).into_response(),
    };
    // Embedding is CPU-bound; keep it off the reactor threads.
    match tokio::task::spawn_blocking(move || handle_retrieve(&state, &req)).await {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError { status: StatusCode::INTERNAL_SERVER_ERROR, reason: e.to_string() }.into_response(),
    }
}

async fn photo_route(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    let Some(path) = state.loaded.as_ref().and_then(|l| l.photos.get(&id)) else {
        return ApiError { status: StatusCode::NOT_FOUND, reason: format!("unknown photo {id}") }.into_response();
    };
    match tokio::fs::read(path).await {
        Ok(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        Err(e) => ApiError { status: StatusCode::NOT_FOUND, reason: e.to_string() }.into_response(),
    }
}

async fn health_route(State(state): State<AppState>) -> Json<Health> {
    Json(health(&state))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/retrieve", post(retrieve_route))
        .route("/api/photo/{id}", get(photo_route))
        .route("/api/health", get(health_route))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
