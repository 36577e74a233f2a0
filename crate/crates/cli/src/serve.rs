//! JSON API over a data root, mounted at `/api/v1`.
//!
//! Everything is read-only except `POST /runs/{id}/queries`, which appends a
//! query record. Submissions for the same run are serialised.

use std::collections::HashMap;
use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use framewise::corpus::{AnalysisRun, CorpusError, FrameDescription, RunStore};
use framewise::media::{media_type_for_path, ImagePayload};
use framewise::pipeline::{run_query, PipelineError};
use framewise::report::{render_report, ReportError, ReportFormat};
use framewise::summarize::{QueryRecord, SummarizeError};
use framewise::vlm::VlmClient;

use crate::commands::{shared_client, CliError};
use crate::ServeArgs;

const DEFAULT_THUMBNAIL: u32 = 160;

#[derive(Clone)]
pub struct AppState {
    store: Arc<RunStore>,
    text: Arc<VlmClient>,
    locks: Arc<Mutex<HashMap<String, Arc<Mutex<()>>>>>,
}

impl AppState {
    pub fn new(store: RunStore, text: Arc<VlmClient>) -> Self {
        Self {
            store: Arc::new(store),
            text,
            locks: Arc::default(),
        }
    }

    fn run_lock(&self, run_id: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|p| p.into_inner());
        map.entry(run_id.to_string()).or_default().clone()
    }
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
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<CorpusError> for ApiError {
    fn from(e: CorpusError) -> Self {
        let status = match e {
            CorpusError::NotFound(_) | CorpusError::InvalidRunId(_) => StatusCode::NOT_FOUND,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let message = e.to_string();
        let status = match e {
            PipelineError::Corpus(c) => return c.into(),
            PipelineError::Summarize(SummarizeError::EmptyQuery) => StatusCode::BAD_REQUEST,
            PipelineError::Summarize(SummarizeError::EmptyCorpus) => StatusCode::CONFLICT,
            PipelineError::Summarize(SummarizeError::Provider(_)) => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, message)
    }
}

/// Runs blocking storage or provider work off the async executor.
async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

pub fn router(state: AppState) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/runs", get(list_runs))
        .route("/runs/{id}", get(get_run))
        .route("/runs/{id}/report", get(get_report))
        .route("/runs/{id}/frames/{n}", get(get_frame))
        .route("/runs/{id}/thumbnails/{n}", get(get_thumbnail))
        .route("/runs/{id}/queries", get(list_queries).post(post_query));
    Router::new()
        .nest("/api/v1", api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "no such endpoint") })
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "api": "v1", "version": env!("CARGO_PKG_VERSION") }))
}

async fn list_runs(State(s): State<AppState>) -> Result<Response, ApiError> {
    let runs = blocking(move || Ok(s.store.list()?)).await?;
    Ok(Json(serde_json::json!({ "runs": runs })).into_response())
}

#[derive(Serialize)]
struct RunDetail {
    #[serde(flatten)]
    run: AnalysisRun,
    descriptions: Vec<FrameDescription>,
    queries: Vec<QueryRecord>,
}

async fn get_run(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Json<RunDetail>, ApiError> {
    let mut run = blocking(move || Ok(s.store.load(&id)?)).await?;
    let descriptions = std::mem::take(&mut run.descriptions);
    let queries = std::mem::take(&mut run.queries);
    Ok(Json(RunDetail {
        run,
        descriptions,
        queries,
    }))
}

#[derive(Deserialize)]
struct ReportParams {
    format: Option<String>,
}

async fn get_report(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(p): Query<ReportParams>,
) -> Result<Response, ApiError> {
    let format: ReportFormat = p
        .format
        .as_deref()
        .unwrap_or("markdown")
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let bytes = blocking(move || {
        let run = s.store.load(&id)?;
        render_report(&run, format).map_err(|e| match e {
            ReportError::Incomplete(_) => ApiError::new(StatusCode::CONFLICT, e.to_string()),
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        })
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, format.content_type())], bytes).into_response())
}

fn frame_number(raw: &str) -> Result<u64, ApiError> {
    raw.parse()
        .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, format!("`{raw}` is not a frame number")))
}

fn read_frame(store: &RunStore, id: &str, n: u64) -> Result<(String, Vec<u8>), ApiError> {
    let path = store
        .frame_path(id, n)?
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("run `{id}` has no frame {n}")))?;
    let bytes = std::fs::read(&path).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let media_type = media_type_for_path(&path).unwrap_or("application/octet-stream");
    Ok((media_type.to_string(), bytes))
}

async fn get_frame(
    State(s): State<AppState>,
    UrlPath((id, n)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let n = frame_number(&n)?;
    let (media_type, bytes) = blocking(move || read_frame(&s.store, &id, n)).await?;
    Ok(([(header::CONTENT_TYPE, media_type)], Bytes::from(bytes)).into_response())
}

#[derive(Deserialize)]
struct ThumbnailParams {
    size: Option<u32>,
}

async fn get_thumbnail(
    State(s): State<AppState>,
    UrlPath((id, n)): UrlPath<(String, String)>,
    Query(p): Query<ThumbnailParams>,
) -> Result<Response, ApiError> {
    let n = frame_number(&n)?;
    let size = p.size.unwrap_or(DEFAULT_THUMBNAIL).clamp(16, 1024);
    let png = blocking(move || {
        let (media_type, bytes) = read_frame(&s.store, &id, n)?;
        let img = ImagePayload::new(media_type, bytes)
            .decode()
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("frame {n}: {e}")))?;
        let thumb = ImagePayload::encode(&img.thumbnail(size, size), "image/png")
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
        Ok(thumb.data.to_vec())
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], Bytes::from(png)).into_response())
}

async fn list_queries(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let run = blocking(move || Ok(s.store.load(&id)?)).await?;
    Ok(Json(serde_json::json!({ "queries": run.queries })).into_response())
}

#[derive(Deserialize)]
struct QueryBody {
    query: String,
}

async fn post_query(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<QueryBody>, JsonRejection>,
) -> Result<Json<QueryRecord>, ApiError> {
    let Json(body) = body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.body_text()))?;
    let rec = blocking(move || {
        if !s.store.exists(&id) {
            return Err(CorpusError::NotFound(id).into());
        }
        let lock = s.run_lock(&id);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());
        Ok(run_query(&s.store, &id, &body.query, &s.text)?)
    })
    .await?;
    Ok(Json(rec))
}

pub(crate) fn run(data_root: &Path, args: ServeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if !data_root.is_dir() {
        return Err(CliError::Usage(format!(
            "data root {} does not exist",
            data_root.display()
        )));
    }
    let text = shared_client(&args.text_provider)?;
    let state = AppState::new(RunStore::new(data_root), text);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Failed(e.to_string()))?;
    rt.block_on(async move {
        let addr: SocketAddr = format!("{}:{}", args.host, args.port)
            .parse()
            .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Failed(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::Failed(e.to_string()))?;
        writeln!(out, "listening on http://{local}/api/v1")
            .and_then(|_| out.flush())
            .map_err(|e| CliError::Failed(e.to_string()))?;
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Failed(e.to_string()))
    })
}
