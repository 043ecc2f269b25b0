//! HTTP annotation service: encode an image once, prompt it many times,
//! accept masks and export them as COCO JSON.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tokio::sync::Semaphore;
use tower_http::services::ServeDir;

use ultrasam_core::data::{decode_png, rle_decode, rle_encode, write_coco, Category, CocoDataset, ImageRecord, InstanceAnnotation, Rle};
use ultrasam_core::model::{ImageEmbedding, ModelConfig, Preprocessed, PromptModel};
use ultrasam_core::prompts::Prompt;

/// Upload size limit (8 MiB).
pub const DEFAULT_BODY_LIMIT: usize = 8 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub port: u16,
    /// Concurrent encoder/decoder jobs.
    pub workers: usize,
    /// Sessions kept before the least recently used one is evicted.
    pub max_sessions: usize,
    pub body_limit: usize,
    /// Directory served at `/`; a built-in page is used without one.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            port: 8823,
            workers: 2,
            max_sessions: 64,
            body_limit: DEFAULT_BODY_LIMIT,
            static_dir: None,
        }
    }
}

/// One uploaded image with its cached embedding. The embedding is never
/// mutated; only the accepted list changes.
pub struct Session {
    pub image_id: String,
    /// Stable numeric id used in exports, in upload order.
    pub export_id: u64,
    pub pre: Preprocessed,
    pub embedding: ImageEmbedding,
    pub accepted: Mutex<Vec<(Rle, u64)>>,
}

pub struct AppState {
    pub model: Arc<PromptModel>,
    pub checkpoint_hash: String,
    sessions: Mutex<IndexMap<String, Arc<Session>>>,
    max_sessions: usize,
    workers: Semaphore,
    encode_calls: AtomicUsize,
    next_export_id: AtomicU64,
}

impl AppState {
    pub fn new(model: PromptModel, checkpoint_hash: String, cfg: &ServiceConfig) -> Self {
        Self {
            model: Arc::new(model),
            checkpoint_hash,
            sessions: Mutex::new(IndexMap::new()),
            max_sessions: cfg.max_sessions.max(1),
            workers: Semaphore::new(cfg.workers.max(1)),
            encode_calls: AtomicUsize::new(0),
            next_export_id: AtomicU64::new(1),
        }
    }

    /// Number of image-encoder invocations so far.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::SeqCst)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }

    /// Looks up a session and marks it most recently used.
    fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        let mut map = self.sessions.lock().expect("session lock");
        let idx = map
            .get_index_of(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image id {id}")))?;
        let last = map.len() - 1;
        map.move_index(idx, last);
        Ok(map[last].clone())
    }

    fn insert(&self, s: Session) {
        let mut map = self.sessions.lock().expect("session lock");
        map.insert(s.image_id.clone(), Arc::new(s));
        while map.len() > self.max_sessions {
            if let Some((id, _)) = map.shift_remove_index(0) {
                log::info!("evicted session {id}");
            }
        }
    }
}

/// Hex SHA-256 of checkpoint bytes.
pub fn checkpoint_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl ToString) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message.to_string())
    }

    fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::new(r.status(), r.body_text())
    }
}

/// Runs blocking model work on the worker pool.
async fn run_model<T: Send + 'static>(state: &AppState, f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    let _permit = state.workers.acquire().await.map_err(ApiError::internal)?;
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UploadResponse {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
}

async fn upload(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<UploadResponse>, ApiError> {
    let image = decode_png(&body).map_err(|e| ApiError::new(StatusCode::UNSUPPORTED_MEDIA_TYPE, e.to_string()))?;
    let model = state.model.clone();
    let (pre, embedding) = run_model(&state, move || {
        let pre = model.preprocess(&image);
        model.encode_image(&pre.pixels).map(|e| (pre, e))
    })
    .await?
    .map_err(ApiError::internal)?;
    state.encode_calls.fetch_add(1, Ordering::SeqCst);
    let resp = UploadResponse {
        image_id: uuid::Uuid::new_v4().simple().to_string(),
        width: pre.orig_width,
        height: pre.orig_height,
    };
    state.insert(Session {
        image_id: resp.image_id.clone(),
        export_id: state.next_export_id.fetch_add(1, Ordering::SeqCst),
        pre,
        embedding,
        accepted: Mutex::new(Vec::new()),
    });
    Ok(Json(resp))
}

fn default_true() -> bool {
    true
}

fn default_refine() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictRequest {
    pub prompts: Vec<Prompt>,
    #[serde(default = "default_true")]
    pub multimask: bool,
    #[serde(default = "default_refine")]
    pub refine_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireMask {
    pub rle: Rle,
    pub iou: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub masks: Vec<WireMask>,
    pub best: usize,
}

/// Most refinement passes a request may ask for.
const MAX_REFINE_STEPS: usize = 8;

async fn predict(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<PredictRequest>, JsonRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let session = state.session(&id)?;
    let Json(req) = req?;
    if req.prompts.is_empty() {
        return Err(ApiError::unprocessable("prompts must not be empty"));
    }
    if req.refine_steps > MAX_REFINE_STEPS {
        return Err(ApiError::unprocessable(format!("refine_steps above {MAX_REFINE_STEPS}")));
    }
    let (w, h) = (session.pre.orig_width, session.pre.orig_height);
    for p in &req.prompts {
        p.validate(w, h).map_err(ApiError::unprocessable)?;
    }
    let model = state.model.clone();
    let pred = run_model(&state, move || {
        let mapped: Vec<Prompt> = req.prompts.iter().map(|p| session.pre.to_model(p)).collect();
        model
            .decode_prompts(&session.embedding, &mapped, req.multimask, req.refine_steps)
            .map(|pred| {
                let masks = pred
                    .mask_logits
                    .iter()
                    .zip(&pred.iou_pred)
                    .map(|(logits, &iou)| WireMask {
                        rle: rle_encode(&session.pre.logits_to_mask(logits)),
                        iou,
                    })
                    .collect();
                PredictResponse {
                    masks,
                    best: pred.best_index,
                }
            })
    })
    .await?
    .map_err(ApiError::unprocessable)?;
    Ok(Json(pred))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptRequest {
    pub rle: Rle,
    pub category_id: u64,
}

async fn accept(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<AcceptRequest>, JsonRejection>,
) -> Result<Json<serde_json::Value>, ApiError> {
    let session = state.session(&id)?;
    let Json(req) = req?;
    let size = [session.pre.orig_height, session.pre.orig_width];
    if req.rle.size != size {
        return Err(ApiError::unprocessable(format!("mask size {:?} does not match image {:?}", req.rle.size, size)));
    }
    let mask = rle_decode(&req.rle).map_err(ApiError::unprocessable)?;
    if mask.is_empty() {
        return Err(ApiError::unprocessable("mask is empty"));
    }
    let mut accepted = session.accepted.lock().expect("accept lock");
    accepted.push((rle_encode(&mask), req.category_id));
    Ok(Json(json!({ "count": accepted.len() })))
}

/// COCO document of every live session's accepted instances. Boxes and
/// areas are recomputed from the masks.
pub fn export_dataset(state: &AppState) -> CocoDataset {
    let sessions: Vec<Arc<Session>> = {
        let map = state.sessions.lock().expect("session lock");
        let mut v: Vec<Arc<Session>> = map.values().cloned().collect();
        v.sort_by_key(|s| s.export_id);
        v
    };
    let mut ds = CocoDataset::default();
    let mut cats = std::collections::BTreeSet::new();
    let mut next = 1;
    for s in &sessions {
        ds.images.push(ImageRecord {
            id: s.export_id,
            file_name: format!("{}.png", s.image_id),
            width: s.pre.orig_width,
            height: s.pre.orig_height,
            source: None,
            pixels: None,
        });
        for (rle, cat) in s.accepted.lock().expect("accept lock").iter() {
            let mask = rle_decode(rle).expect("accepted masks were validated");
            let ann = InstanceAnnotation::from_mask(next, s.export_id, *cat, &mask).expect("accepted masks are non-empty");
            ds.annotations.push(ann);
            cats.insert(*cat);
            next += 1;
        }
    }
    ds.categories = cats
        .into_iter()
        .map(|id| Category {
            id,
            name: format!("category_{id}"),
        })
        .collect();
    ds
}

async fn export(State(state): State<Arc<AppState>>) -> Response {
    let body = write_coco(&export_dataset(&state));
    ([(axum::http::header::CONTENT_TYPE, "application/json")], body).into_response()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSummary {
    pub config: ModelConfig,
    pub parameters: usize,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({
        "status": "ok",
        "model": ModelSummary {
            config: state.model.config.clone(),
            parameters: state.model.num_parameters(),
        },
        "checkpoint_hash": state.checkpoint_hash,
    }))
}

const INDEX_HTML: &str = include_str!("index.html");

pub fn router(state: Arc<AppState>, cfg: &ServiceConfig) -> Router {
    let api = Router::new()
        .route("/v1/images", post(upload))
        .route("/v1/images/{id}/predict", post(predict))
        .route("/v1/images/{id}/accept", post(accept))
        .route("/v1/export", get(export))
        .route("/v1/health", get(health))
        .layer(DefaultBodyLimit::max(cfg.body_limit))
        .with_state(state);
    match &cfg.static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(|| async { Html(INDEX_HTML) })),
    }
}

/// Binds `0.0.0.0:port` and serves until the process ends.
pub async fn serve(model: PromptModel, checkpoint_hash: String, cfg: ServiceConfig) -> std::io::Result<()> {
    let state = Arc::new(AppState::new(model, checkpoint_hash, &cfg));
    let app = router(state, &cfg);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", cfg.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}
