//! HTTP inference service over a shared checkpoint and scene registry.

use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fpt_core::gmm::Gmm2;
use fpt_core::infer::{InferError, Scene, DEFAULT_GRID, DEFAULT_THRESHOLD};
use fpt_core::model::{Checkpoint, ImageCache};
use fpt_core::synth::{Dataset, SceneRaster, SceneSpec};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::render::raster_png;
use crate::wire::{check_points, check_poke, check_pokes, FieldError, WirePoint, WirePoke};

pub const MAX_GRID: usize = 128;

pub struct LoadedModel {
    pub ckpt: Checkpoint,
    pub hash: String,
    /// Image tokens per registry scene, filled on first use. Owned by the
    /// model so a different checkpoint never sees them.
    images: Vec<OnceLock<ImageCache>>,
}

impl LoadedModel {
    pub fn new(bytes: &[u8], n_scenes: usize) -> Result<Self, fpt_core::model::ModelError> {
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let hash = hex::encode(Sha256::digest(bytes));
        Ok(Self {
            ckpt,
            hash,
            images: (0..n_scenes).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn threshold(&self) -> f64 {
        self.ckpt
            .meta
            .segmentation_threshold
            .unwrap_or(DEFAULT_THRESHOLD)
    }
}

pub struct SceneEntry {
    pub id: String,
    pub spec: SceneSpec,
    pub raster: SceneRaster,
}

pub struct AppState {
    pub model: Option<LoadedModel>,
    pub scenes: Vec<SceneEntry>,
}

impl AppState {
    /// Registry ids are the zero-padded dataset indices.
    pub fn new(
        model_bytes: Option<&[u8]>,
        data: Dataset,
    ) -> Result<Self, fpt_core::model::ModelError> {
        let scenes: Vec<SceneEntry> = data
            .scenes
            .into_iter()
            .enumerate()
            .map(|(i, s)| SceneEntry {
                id: format!("{i:04}"),
                spec: s.spec,
                raster: s.raster,
            })
            .collect();
        let model = model_bytes
            .map(|b| LoadedModel::new(b, scenes.len()))
            .transpose()?;
        Ok(Self { model, scenes })
    }

    fn scene(&self, id: &str) -> Result<usize, ApiError> {
        self.scenes.iter().position(|s| s.id == id).ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, format!("unknown scene {id}"), None)
        })
    }

    fn model(&self) -> Result<&LoadedModel, ApiError> {
        self.model
            .as_ref()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "model not loaded", None))
    }

    fn prepared(&self, idx: usize) -> Result<Scene<'_>, ApiError> {
        let m = self.model()?;
        let params = &m.ckpt.params;
        if self.scenes[idx].raster.size != params.config.image_size {
            return Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "scene raster does not match the model",
                None,
            ));
        }
        let image = match m.images[idx].get() {
            Some(i) => i.clone(),
            None => {
                let i = ImageCache::encode(params, &self.scenes[idx].raster)
                    .map_err(|e| ApiError::internal(e.to_string()))?;
                m.images[idx].get_or_init(|| i).clone()
            }
        };
        Ok(Scene::with_image(params, image))
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    error: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>, field: Option<String>) -> Self {
        Self {
            status,
            error: error.into(),
            field,
        }
    }

    fn internal(error: String) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, error, None)
    }
}

impl From<FieldError> for ApiError {
    fn from(e: FieldError) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, e.error, Some(e.field))
    }
}

impl From<InferError> for ApiError {
    fn from(e: InferError) -> Self {
        match e {
            InferError::Context { .. } => Self::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                e.to_string(),
                Some("grid".into()),
            ),
            InferError::Input(m) => Self::new(StatusCode::UNPROCESSABLE_ENTITY, m, None),
            other => Self::internal(other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(json!({ "error": self.error, "field": self.field })),
        )
            .into_response()
    }
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let field = (path != ".").then_some(path);
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            e.inner().to_string(),
            field,
        )
    })
}

fn check_grid(grid: usize) -> Result<usize, ApiError> {
    if (1..=MAX_GRID).contains(&grid) {
        Ok(grid)
    } else {
        Err(FieldError {
            field: "grid".into(),
            error: format!("grid must be in 1..={MAX_GRID}"),
        }
        .into())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictRequest {
    #[serde(default)]
    pub pokes: Vec<WirePoke>,
    pub queries: Vec<WirePoint>,
}

#[derive(Serialize, Deserialize)]
pub struct PredictResponse {
    pub distributions: Vec<Gmm2>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mean,
    Ar,
}

fn default_grid() -> usize {
    DEFAULT_GRID
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseRequest {
    #[serde(default)]
    pub pokes: Vec<WirePoke>,
    #[serde(default = "default_grid")]
    pub grid: usize,
    pub method: Method,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
pub struct DenseResponse {
    pub grid: usize,
    pub flows: Vec<[f64; 2]>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentRequest {
    pub poke: WirePoke,
    #[serde(default = "default_grid")]
    pub grid: usize,
    pub threshold: Option<f64>,
}

#[derive(Serialize, Deserialize)]
pub struct SegmentResponse {
    pub heat: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

type Shared = Arc<AppState>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn health(State(s): State<Shared>) -> Response {
    match &s.model {
        Some(m) => Json(json!({ "status": "ok", "checkpoint_hash": m.hash })).into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(json!({ "status": "no model", "checkpoint_hash": null })),
        )
            .into_response(),
    }
}

async fn scenes(State(s): State<Shared>) -> Response {
    let list: Vec<_> = s
        .scenes
        .iter()
        .map(|e| json!({ "id": e.id, "template": e.spec.template, "raster_png_url": format!("/v1/scenes/{}/raster.png", e.id) }))
        .collect();
    Json(list).into_response()
}

async fn raster(State(s): State<Shared>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let idx = s.scene(&id)?;
    let png = raster_png(&s.scenes[idx].raster);
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn predict(
    State(s): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<PredictResponse>, ApiError> {
    let idx = s.scene(&id)?;
    s.model()?;
    let req: PredictRequest = parse(&body)?;
    let pokes = check_pokes(&req.pokes, "pokes")?;
    let queries = check_points(&req.queries, "queries")?;
    blocking(move || {
        let scene = s.prepared(idx)?;
        let budget = scene.params.config.max_context;
        if pokes.len() + queries.len() > budget {
            return Err(FieldError {
                field: "queries".into(),
                error: format!("context budget {budget} exceeded"),
            }
            .into());
        }
        Ok(Json(PredictResponse {
            distributions: scene.predict(&pokes, &queries)?,
        }))
    })
    .await
}

async fn dense(
    State(s): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<DenseResponse>, ApiError> {
    let idx = s.scene(&id)?;
    s.model()?;
    let req: DenseRequest = parse(&body)?;
    let pokes = check_pokes(&req.pokes, "pokes")?;
    let grid = check_grid(req.grid)?;
    blocking(move || {
        let scene = s.prepared(idx)?;
        let field = match req.method {
            Method::Mean => scene.dense_mean(&pokes, grid)?,
            Method::Ar => scene.ar_sample(&pokes, grid, req.seed)?,
        };
        Ok(Json(DenseResponse {
            grid,
            flows: field.flows,
        }))
    })
    .await
}

async fn segment(
    State(s): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SegmentResponse>, ApiError> {
    let idx = s.scene(&id)?;
    let model = s.model()?;
    let req: SegmentRequest = parse(&body)?;
    let poke = check_poke(&req.poke, "poke")?;
    let grid = check_grid(req.grid)?;
    let threshold = req.threshold.unwrap_or_else(|| model.threshold());
    if threshold.is_nan() {
        return Err(FieldError {
            field: "threshold".into(),
            error: "threshold is NaN".into(),
        }
        .into());
    }
    blocking(move || {
        let r = s.prepared(idx)?.segment(poke, grid, threshold)?;
        Ok(Json(SegmentResponse {
            heat: r.heat,
            mask: r.mask,
            threshold: r.threshold,
        }))
    })
    .await
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/scenes", get(scenes))
        .route("/v1/scenes/{id}/raster.png", get(raster))
        .route("/v1/scenes/{id}/predict", post(predict))
        .route("/v1/scenes/{id}/dense", post(dense))
        .route("/v1/scenes/{id}/segment", post(segment))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
