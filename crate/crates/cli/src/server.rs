//! HTTP/JSON API over a [`Session`].
//!
//! | route | purpose |
//! |---|---|
//! | `GET /api/v1/volume/meta` | dims, dtype, voxel count and `W` |
//! | `GET /api/v1/slice/{axis}/{index}?lo&hi` | 8-bit PNG, linear window `[lo, hi]` (default `[0, W]`) |
//! | `GET /api/v1/slice/{axis}/{index}/raw` | slice samples, little endian, row-major |
//! | `GET/POST/DELETE /api/v1/seeds` | list, add (`{positions, env_size?}`), remove (empty body clears) |
//! | `POST /api/v1/train` | train on the current seeds; returns model and CV report |
//! | `GET /api/v1/model` | current model; 404 when absent or stale |
//! | `POST /api/v1/preview` | RGBA overlay PNG of one slice under the current model |
//! | `POST /api/v1/segment` | start a full segmentation job |
//! | `GET/DELETE /api/v1/jobs/{id}` | poll or cancel a job |
//! | `GET /api/v1/session`, `GET /api/v1/sessions/{id}` | serialized session state |

use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use faith_core::segmenter::preview_slice;
use faith_core::volume::{Axis, Position};
use faith_core::{SegmentOptions, Volume};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::render::{self, Window};
use crate::session::{JobView, ServiceError, Session, SessionState, TrainResponse};
use crate::training::TrainParams;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).expect("valid status");
        let mut body = serde_json::json!({ "error": self.to_string() });
        if let ServiceError::BorderSeeds {
            env_size,
            positions,
        } = &self
        {
            body["env_size"] = (*env_size).into();
            body["positions"] = serde_json::to_value(positions).expect("positions serialize");
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

pub struct AppState {
    session: Mutex<Session>,
    volume: Arc<Volume>,
    /// Serializes training runs without blocking reads of the session.
    training: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(session: Session) -> Self {
        Self {
            volume: Arc::clone(session.volume()),
            session: Mutex::new(session),
            training: tokio::sync::Mutex::new(()),
        }
    }

    pub fn session(&self) -> MutexGuard<'_, Session> {
        self.session.lock().unwrap_or_else(|p| p.into_inner())
    }
}

pub type Shared = Arc<AppState>;

pub fn router(session: Session) -> Router {
    router_with_state(Arc::new(AppState::new(session)))
}

pub fn router_with_state(state: Shared) -> Router {
    let api = Router::new()
        .route("/volume/meta", get(volume_meta))
        .route("/slice/{axis}/{index}", get(slice_png))
        .route("/slice/{axis}/{index}/raw", get(slice_raw))
        .route(
            "/seeds",
            get(list_seeds).post(add_seeds).delete(delete_seeds),
        )
        .route("/train", post(train))
        .route("/model", get(model))
        .route("/preview", post(preview))
        .route("/segment", post(start_segment))
        .route("/jobs/{id}", get(job_status).delete(cancel_job))
        .route("/session", get(session_state))
        .route("/sessions/{id}", get(session_by_id));
    Router::new().nest("/api/v1", api).with_state(state)
}

/// Parses a JSON body, reporting every decoding failure as 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid body: {e}")))
}

fn parse_axis(axis: &str) -> ApiResult<Axis> {
    Axis::parse(axis).ok_or_else(|| ServiceError::BadRequest(format!("unknown axis {axis:?}")))
}

fn parse_index(index: &str) -> ApiResult<usize> {
    index
        .parse()
        .map_err(|_| ServiceError::BadRequest(format!("invalid slice index {index:?}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(format!("worker failed: {e}")))?
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn volume_meta(State(app): State<Shared>) -> impl IntoResponse {
    Json(app.volume.meta().report())
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    lo: Option<f64>,
    hi: Option<f64>,
}

async fn slice_png(
    State(app): State<Shared>,
    Path((axis, index)): Path<(String, String)>,
    Query(q): Query<WindowQuery>,
) -> ApiResult<Response> {
    let axis = parse_axis(&axis)?;
    let index = parse_index(&index)?;
    let full = Window::full(app.volume.meta().max_value());
    let window = Window::new(q.lo.unwrap_or(full.lo), q.hi.unwrap_or(full.hi))
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let (geom, values) = app
        .volume
        .slice_values(axis, index)
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let pixels = render::window_slice(&values, window);
    let png = render::gray_png(geom.width, geom.height, &pixels)
        .map_err(|e| ServiceError::Internal(e.to_string()))?;
    Ok(png_response(png))
}

async fn slice_raw(
    State(app): State<Shared>,
    Path((axis, index)): Path<(String, String)>,
) -> ApiResult<Response> {
    let axis = parse_axis(&axis)?;
    let index = parse_index(&index)?;
    let dtype = app.volume.meta().dtype;
    let (geom, values) = app
        .volume
        .slice_values(axis, index)
        .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let mut response = render::raw_slice_bytes(&values, dtype).into_response();
    let headers = response.headers_mut();
    headers.insert(
        header::CONTENT_TYPE,
        HeaderValue::from_static("application/octet-stream"),
    );
    headers.insert("x-width", geom.width.into());
    headers.insert("x-height", geom.height.into());
    headers.insert("x-dtype", HeaderValue::from_static(dtype.name()));
    Ok(response)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedList {
    pub positions: Vec<Position>,
    pub env_size: usize,
    pub model_stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEdit {
    pub positions: Vec<Position>,
    #[serde(default, alias = "K", alias = "k")]
    pub env_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEditResult {
    /// Seeds added or removed by the request.
    pub changed: usize,
    #[serde(flatten)]
    pub seeds: SeedList,
}

fn seed_list(session: &Session) -> SeedList {
    let s = session.state();
    SeedList {
        positions: s.seeds.clone(),
        env_size: s.env_size,
        model_stale: s.model_stale,
    }
}

async fn list_seeds(State(app): State<Shared>) -> Json<SeedList> {
    Json(seed_list(&app.session()))
}

async fn add_seeds(State(app): State<Shared>, body: Bytes) -> ApiResult<Json<SeedEditResult>> {
    let edit: SeedEdit = parse_body(&body)?;
    let mut session = app.session();
    let changed = session.add_seeds(&edit.positions, edit.env_size)?;
    Ok(Json(SeedEditResult {
        changed,
        seeds: seed_list(&session),
    }))
}

async fn delete_seeds(State(app): State<Shared>, body: Bytes) -> ApiResult<Json<SeedEditResult>> {
    let edit: Option<SeedEdit> = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        Some(parse_body(&body)?)
    };
    let mut session = app.session();
    let changed = match edit {
        None => session.clear_seeds()?,
        Some(edit) => session.remove_seeds(&edit.positions)?,
    };
    Ok(Json(SeedEditResult {
        changed,
        seeds: seed_list(&session),
    }))
}

async fn train(State(app): State<Shared>, body: Bytes) -> ApiResult<Json<TrainResponse>> {
    let params: TrainParams = parse_body(&body)?;
    let _guard = app.training.lock().await;
    let job = app.session().prepare_training(&params)?;
    let (job, outcome) = blocking(move || {
        let outcome = faith_core::train_from_seeds(&job.volume, &job.seeds, &job.config)?;
        Ok((job, outcome))
    })
    .await?;
    let response = app.session().commit_training(&job, outcome)?;
    Ok(Json(response))
}

async fn model(State(app): State<Shared>) -> ApiResult<Response> {
    let session = app.session();
    let model = session.current_model()?;
    Ok(([(header::CONTENT_TYPE, "application/json")], model.to_json()).into_response())
}

#[derive(Debug, Clone, Deserialize)]
struct PreviewRequest {
    axis: String,
    index: usize,
}

async fn preview(State(app): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: PreviewRequest = parse_body(&body)?;
    let axis = parse_axis(&req.axis)?;
    let model = app
        .session()
        .current_model()
        .map_err(|e| ServiceError::Conflict(e.to_string()))?
        .clone();
    let volume = Arc::clone(&app.volume);
    let preview = blocking(move || Ok(preview_slice(&volume, &model, axis, req.index)?)).await?;
    let png = render::overlay_png(&preview).map_err(|e| ServiceError::Internal(e.to_string()))?;
    let mut response = png_response(png);
    let headers = response.headers_mut();
    headers.insert("x-adaptive-only", preview.adaptive_only().into());
    headers.insert(
        "x-adaptive-set",
        preview.adaptive.iter().filter(|a| **a).count().into(),
    );
    headers.insert(
        "x-global-set",
        preview.global.iter().filter(|g| **g).count().into(),
    );
    Ok(response)
}

#[derive(Debug, Clone, Deserialize)]
struct SegmentRequest {
    out_path: PathBuf,
    slab: Option<usize>,
    workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobCreated {
    pub job_id: u64,
}

async fn start_segment(State(app): State<Shared>, body: Bytes) -> ApiResult<Response> {
    let req: SegmentRequest = parse_body(&body)?;
    let defaults = SegmentOptions::default();
    let options = SegmentOptions {
        slab_thickness: req.slab.unwrap_or(defaults.slab_thickness),
        workers: req.workers.unwrap_or(defaults.workers),
    };
    let (job, model) = app.session().create_job(req.out_path, options)?;
    let volume = Arc::clone(&app.volume);
    let id = job.id;
    tokio::task::spawn_blocking(move || job.run(&volume, &model));
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job_id: id })).into_response())
}

fn parse_job_id(id: &str) -> ApiResult<u64> {
    id.parse()
        .map_err(|_| ServiceError::NotFound(format!("no job {id:?}")))
}

async fn job_status(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    let job = app.session().job(parse_job_id(&id)?)?;
    Ok(Json(job.view()))
}

async fn cancel_job(State(app): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<JobView>> {
    let job = app.session().job(parse_job_id(&id)?)?;
    job.cancel();
    Ok(Json(job.view()))
}

async fn session_state(State(app): State<Shared>) -> Json<SessionState> {
    Json(app.session().state().clone())
}

async fn session_by_id(
    State(app): State<Shared>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionState>> {
    let session = app.session();
    if session.id() != id {
        return Err(ServiceError::NotFound(format!("no session {id:?}")));
    }
    Ok(Json(session.state().clone()))
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(session: Session, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(session))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
