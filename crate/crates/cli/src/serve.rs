//! HTTP API over pipeline outputs and ground-truth annotations.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use funcgraph_core::canonical;
use funcgraph_core::eval::{self, EvalConfig, GroundTruthGraph};
use funcgraph_core::fusion;
use funcgraph_core::graph::FunctionalSceneGraph;
use funcgraph_core::ply;
use funcgraph_core::scene;
use serde::Deserialize;
use serde_json::json;
use tower_http::cors::{AllowOrigin, CorsLayer};

use crate::config::PipelineConfig;
use crate::pipeline::{scene_dir, CANDIDATES, CANDIDATE_CLOUDS, GRAPH};

/// Voxel size of the whole-scene cloud returned when no candidate is named.
pub const SCENE_CLOUD_VOXEL: f64 = 0.02;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

struct AppState {
    cfg: PipelineConfig,
}

impl AppState {
    fn scene_source(&self, id: &str) -> Result<&Path, ApiError> {
        self.cfg
            .scene_path(id)
            .ok_or_else(|| ApiError::not_found(format!("unknown scene {id}")))
    }

    fn annotation_path(&self, id: &str) -> PathBuf {
        self.cfg.gt_dir().join(format!("{id}.json"))
    }
}

fn read_file(path: &Path, what: &str) -> Result<Vec<u8>, ApiError> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(ApiError::not_found(format!("no {what}"))),
        Err(e) => Err(ApiError::internal(e)),
    }
}

fn with_type(bytes: Vec<u8>, content_type: &'static str) -> Response {
    ([(header::CONTENT_TYPE, content_type)], Body::from(bytes)).into_response()
}

async fn list_scenes(State(state): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(state.cfg.scene_ids())
}

#[derive(Deserialize)]
struct CloudQuery {
    candidate: Option<String>,
}

fn scene_cloud(source: &Path) -> Result<Vec<u8>, ApiError> {
    let seq = scene::load_scene(source).map_err(ApiError::internal)?;
    let mut points = Vec::new();
    for f in &seq.frames {
        for v in 0..f.depth.height() {
            for u in 0..f.depth.width() {
                if f.depth.is_valid(u, v) {
                    if let Ok(p) = scene::unproject(&f.camera, &f.pose, (u, v), f.depth.get(u, v)) {
                        points.push(p);
                    }
                }
            }
        }
    }
    Ok(ply::write_ply(&fusion::voxel_downsample(&points, SCENE_CLOUD_VOXEL)))
}

async fn pointcloud(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<CloudQuery>,
) -> ApiResult {
    let source = state.scene_source(&id)?.to_path_buf();
    let bytes = match q.candidate {
        Some(cid) => {
            let dir = scene_dir(&state.cfg, &id);
            let listing: Vec<serde_json::Value> = serde_json::from_slice(&read_file(&dir.join(CANDIDATES), "candidates")?)
                .map_err(ApiError::internal)?;
            if !listing.iter().any(|c| c["id"] == cid.as_str()) {
                return Err(ApiError::not_found(format!("unknown candidate {cid}")));
            }
            read_file(&dir.join(CANDIDATE_CLOUDS).join(format!("{cid}.ply")), "point cloud")?
        }
        None => tokio::task::spawn_blocking(move || scene_cloud(&source))
            .await
            .map_err(ApiError::internal)??,
    };
    Ok(with_type(bytes, "application/octet-stream"))
}

async fn candidates(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    state.scene_source(&id)?;
    let bytes = read_file(&scene_dir(&state.cfg, &id).join(CANDIDATES), "candidates")?;
    Ok(with_type(bytes, "application/json"))
}

async fn prediction(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    state.scene_source(&id)?;
    let bytes = read_file(&scene_dir(&state.cfg, &id).join(GRAPH), "prediction")?;
    Ok(with_type(bytes, "application/json"))
}

async fn get_annotation(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    state.scene_source(&id)?;
    let bytes = read_file(&state.annotation_path(&id), "annotation")?;
    Ok(with_type(bytes, "application/json"))
}

/// Validates the body against the ground-truth schema and stores it
/// byte-for-byte. Nothing is written when validation fails.
async fn put_annotation(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult {
    state.scene_source(&id)?;
    let text = std::str::from_utf8(&body)
        .map_err(|_| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "annotation must be UTF-8 JSON"))?;
    let gt = GroundTruthGraph::from_json(text).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    if !gt.scene_id.is_empty() && gt.scene_id != id {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("annotation is for scene {}, not {id}", gt.scene_id),
        ));
    }
    canonical::write_atomic(&state.annotation_path(&id), &body).map_err(ApiError::internal)?;
    Ok((StatusCode::OK, Json(json!({ "status": "saved" }))).into_response())
}

async fn frame_color(State(state): State<Arc<AppState>>, UrlPath((id, n)): UrlPath<(String, u32)>) -> ApiResult {
    let source = state.scene_source(&id)?;
    for (ext, mime) in [("png", "image/png"), ("jpg", "image/jpeg"), ("jpeg", "image/jpeg")] {
        let path = source.join("color").join(format!("{n}.{ext}"));
        if path.is_file() {
            return Ok(with_type(read_file(&path, "frame")?, mime));
        }
    }
    Err(ApiError::not_found(format!("no color frame {n}")))
}

/// Scores the stored prediction against the stored annotation, including
/// per-node and per-triplet match records.
async fn scene_eval(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult {
    state.scene_source(&id)?;
    let pred_text = String::from_utf8(read_file(&scene_dir(&state.cfg, &id).join(GRAPH), "prediction")?)
        .map_err(ApiError::internal)?;
    let pred = FunctionalSceneGraph::from_json(&pred_text).map_err(ApiError::internal)?;
    let gt_text = String::from_utf8(read_file(&state.annotation_path(&id), "annotation")?).map_err(ApiError::internal)?;
    let gt = GroundTruthGraph::from_json(&gt_text).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let state2 = state.clone();
    let report = tokio::task::spawn_blocking(move || {
        let cfg: &EvalConfig = &state2.cfg.eval;
        let labels = state2.cfg.label_embeddings();
        let relations = state2.cfg.relation_embeddings();
        eval::evaluate(&[(pred, gt)], cfg, labels.as_ref(), relations.as_ref())
    })
    .await
    .map_err(ApiError::internal)?
    .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    Ok(Json(report).into_response())
}

fn cors(origins: &[String]) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::PUT, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE]);
    if origins.iter().any(|o| o == "*") {
        layer.allow_origin(AllowOrigin::any())
    } else {
        let values: Vec<HeaderValue> = origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()).collect();
        layer.allow_origin(AllowOrigin::list(values))
    }
}

pub fn router(cfg: PipelineConfig) -> Router {
    let layer = cors(&cfg.serve.cors_origins);
    let state = Arc::new(AppState { cfg });
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/scenes/{id}/pointcloud", get(pointcloud))
        .route("/scenes/{id}/candidates", get(candidates))
        .route("/scenes/{id}/prediction", get(prediction))
        .route("/scenes/{id}/annotation", get(get_annotation).put(put_annotation))
        .route("/scenes/{id}/frames/{n}/color", get(frame_color))
        .route("/scenes/{id}/eval", get(scene_eval))
        .layer(layer)
        .with_state(state)
}

/// Serves until the process is terminated.
pub async fn serve(cfg: PipelineConfig, bind: &str) -> io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(cfg)).await
}
