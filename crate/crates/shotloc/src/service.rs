//! HTTP API over the store and the job queue.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use shotloc_core::geo::GeoPoint;

use crate::error::{Error, Result};
use crate::jobs::{JobKind, JobQueue};
use crate::pipeline::{self, IngestRequest};
use crate::store::{CameraFix, ConfirmedBy, Marking, Store};

pub struct AppState {
    pub jobs: JobQueue,
    token: String,
}

impl AppState {
    pub fn new(jobs: JobQueue, token: impl Into<String>) -> Result<Arc<Self>> {
        let token = token.into();
        if token.is_empty() {
            return Err(Error::validation("an access token is required"));
        }
        Ok(Arc::new(AppState { jobs, token }))
    }

    fn store(&self) -> Arc<Store> {
        self.jobs.store().clone()
    }
}

impl IntoResponse for Error {
    fn into_response(self) -> Response {
        let status = match &self {
            Error::Validation(_) | Error::Infeasible(_) | Error::UnsupportedFormat(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::Conflict { .. } | Error::Integrity(_) => StatusCode::CONFLICT,
            Error::CorruptFile(_) | Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.body())).into_response()
    }
}

fn unauthorized() -> Response {
    let body = json!({ "error": "unauthorized", "message": "missing or invalid bearer token", "exit_code": 1 });
    (
        StatusCode::UNAUTHORIZED,
        [(header::WWW_AUTHENTICATE, "Bearer")],
        Json(body),
    )
        .into_response()
}

fn token_matches(headers: &HeaderMap, expected: &str) -> bool {
    let Some(given) = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
    else {
        return false;
    };
    let (a, b) = (given.as_bytes(), expected.as_bytes());
    // Compare in time independent of where the first mismatch is.
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn auth(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if token_matches(req.headers(), &state.token) {
        next.run(req).await
    } else {
        unauthorized()
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| Error::validation(format!("request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Error::Io(format!("task failed: {e}")))?
}

#[derive(Deserialize)]
struct NewCollection {
    title: String,
}

async fn create_collection(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Response> {
    let req: NewCollection = parse(&body)?;
    let store = s.store();
    let doc = blocking(move || store.create_collection(&req.title)).await?;
    Ok((StatusCode::CREATED, Json(doc)).into_response())
}

async fn list_collections(State(s): State<Arc<AppState>>) -> Result<Response> {
    let store = s.store();
    Ok(Json(blocking(move || store.list()).await?).into_response())
}

async fn get_collection(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response> {
    let store = s.store();
    Ok(Json(blocking(move || store.load(&id)).await?).into_response())
}

async fn delete_collection(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Response> {
    let store = s.store();
    blocking(move || store.delete_collection(&id)).await?;
    Ok(StatusCode::NO_CONTENT.into_response())
}

async fn add_video(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response> {
    let req: IngestRequest = parse(&body)?;
    let store = s.store();
    let video = blocking(move || pipeline::ingest(&store, &id, req)).await?;
    Ok((StatusCode::CREATED, Json(video)).into_response())
}

async fn get_video(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let store = s.store();
    let (doc, video) = blocking(move || store.find_video(&id)).await?;
    let markings: Vec<&Marking> = doc
        .markings
        .iter()
        .filter(|m| m.video_id == video.id)
        .collect();
    Ok(Json(json!({
        "video": video,
        "camera_fix": doc.fix(&video.id),
        "markings": markings,
        "version": doc.version,
    }))
    .into_response())
}

async fn delete_video(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let store = s.store();
    let version = blocking(move || store.delete_video(&id)).await?;
    Ok(Json(json!({ "version": version })).into_response())
}

#[derive(Deserialize)]
struct FixBody {
    position: GeoPoint,
    #[serde(default)]
    valid_at: f64,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn put_fix(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response> {
    let req: FixBody = parse(&body)?;
    let store = s.store();
    let fix = CameraFix {
        video_id: id,
        position: req.position,
        valid_at: req.valid_at,
    };
    let version = blocking(move || store.set_camera_fix(fix, req.expected_version)).await?;
    Ok(Json(json!({ "version": version })).into_response())
}

#[derive(Deserialize)]
struct MarkingBody {
    gunshot_index: u32,
    #[serde(default)]
    shock_time: Option<f64>,
    muzzle_time: f64,
    #[serde(default)]
    confirmed_by: ConfirmedBy,
    #[serde(default)]
    expected_version: Option<u64>,
}

async fn put_marking(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response> {
    let req: MarkingBody = parse(&body)?;
    let store = s.store();
    let m = Marking {
        video_id: id,
        gunshot_index: req.gunshot_index,
        shock_time: req.shock_time,
        muzzle_time: req.muzzle_time,
        confirmed_by: req.confirmed_by,
    };
    let version = blocking(move || pipeline::mark(&store, m, req.expected_version)).await?;
    Ok(Json(json!({ "version": version })).into_response())
}

async fn submit_job(
    State(s): State<Arc<AppState>>,
    Path((id, kind)): Path<(String, String)>,
    body: Bytes,
) -> Result<Response> {
    let kind = JobKind::parse(&kind)?;
    let body: Value = if body.is_empty() {
        json!({})
    } else {
        parse(&body)?
    };
    let state = s.clone();
    let view = blocking(move || state.jobs.submit(&id, kind, body)).await?;
    Ok((StatusCode::ACCEPTED, Json(view)).into_response())
}

async fn get_job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    Ok(Json(s.jobs.get(&id)?).into_response())
}

async fn job_result(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let state = s.clone();
    Ok(Json(blocking(move || state.jobs.result(&id)).await?).into_response())
}

async fn geojson(
    State(s): State<Arc<AppState>>,
    Path((id, gunshot)): Path<(String, String)>,
) -> Result<Response> {
    let gunshot: u32 = gunshot
        .parse()
        .map_err(|_| Error::validation(format!("bad gunshot index {gunshot}")))?;
    let store = s.store();
    let value = blocking(move || pipeline::fused_geojson(&store, &id, gunshot)).await?;
    Ok((
        [(header::CONTENT_TYPE, "application/geo+json")],
        pipeline::geojson_bytes(&value),
    )
        .into_response())
}

async fn timeline(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response> {
    let store = s.store();
    let doc = blocking(move || store.load(&id)).await?;
    let tl = doc
        .timeline
        .ok_or_else(|| Error::NotFound(format!("timeline of {}", doc.collection.id)))?;
    Ok(Json(tl).into_response())
}

async fn fallback() -> Response {
    Error::NotFound("no such endpoint".into()).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route(
            "/collections",
            post(create_collection).get(list_collections),
        )
        .route(
            "/collections/{id}",
            get(get_collection).delete(delete_collection),
        )
        .route("/collections/{id}/videos", post(add_video))
        .route("/collections/{id}/jobs/{kind}", post(submit_job))
        .route(
            "/collections/{id}/estimates/{gunshot}/geojson",
            get(geojson),
        )
        .route("/collections/{id}/timeline", get(timeline))
        .route("/videos/{id}", get(get_video).delete(delete_video))
        .route("/videos/{id}/camera-fix", put(put_fix))
        .route("/videos/{id}/markings", put(put_marking))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/result", get(job_result))
        .fallback(fallback)
        .layer(middleware::from_fn_with_state(state.clone(), auth))
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub token: String,
    pub workers: usize,
}

/// Serves until interrupted.
pub fn serve(cfg: ServeConfig, mut on_ready: impl FnMut(SocketAddr)) -> Result<()> {
    let store = Arc::new(Store::open(&cfg.data_dir)?);
    let state = AppState::new(JobQueue::new(store, cfg.workers)?, cfg.token)?;
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Io(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(cfg.listen).await?;
        on_ready(listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
