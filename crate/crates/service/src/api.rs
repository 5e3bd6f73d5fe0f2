//! JSON-over-HTTP session API. Request and response shapes are listed in
//! `docs/api.md`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use foldedit_core::planner::{Instruction, SessionError};
use foldedit_core::store::{ImageUri, StoreError};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::net::TcpListener;

use crate::config::FieldError;
use crate::registry::{CreateRequest, Registry, RegistryError};

pub const DEFAULT_TURN_TIMEOUT: Duration = Duration::from_secs(120);
const MAX_BODY_BYTES: usize = 64 << 20;

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub turn_timeout: Duration,
}

#[derive(Debug)]
pub enum ApiError {
    Registry(RegistryError),
    Timeout(Duration),
    Internal(String),
}

impl From<RegistryError> for ApiError {
    fn from(e: RegistryError) -> ApiError {
        ApiError::Registry(e)
    }
}

fn body(status: StatusCode, code: &str, message: String, fields: Option<&[FieldError]>) -> Response {
    let mut v = json!({"error": code, "message": message});
    if let Some(f) = fields {
        v["fields"] = serde_json::to_value(f).expect("fields serialize");
    }
    (status, Json(v)).into_response()
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        use RegistryError as R;
        let e = match self {
            ApiError::Timeout(d) => {
                return body(
                    StatusCode::GATEWAY_TIMEOUT,
                    "timeout",
                    format!(
                        "turn did not finish within {}s; it keeps running and the session stays busy until it does",
                        d.as_secs_f64()
                    ),
                    None,
                )
            }
            ApiError::Internal(m) => return body(StatusCode::INTERNAL_SERVER_ERROR, "internal", m, None),
            ApiError::Registry(e) => e,
        };
        let msg = e.to_string();
        match &e {
            R::NotFound(_) | R::Store(StoreError::UnknownTarget(_)) => {
                body(StatusCode::NOT_FOUND, "not_found", msg, None)
            }
            R::Busy(_) => body(StatusCode::CONFLICT, "busy", msg, None),
            R::Validation(f) => body(StatusCode::UNPROCESSABLE_ENTITY, "validation", msg, Some(f)),
            R::Session(SessionError::Closed) => body(StatusCode::CONFLICT, "closed", msg, None),
            R::Session(SessionError::TurnLimit(_)) => body(StatusCode::CONFLICT, "turn_limit", msg, None),
            R::Session(SessionError::EmptyInstruction) => body(
                StatusCode::UNPROCESSABLE_ENTITY,
                "validation",
                msg,
                Some(&[FieldError::new("instruction", "must not be empty")]),
            ),
            _ => body(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg, None),
        }
    }
}

/// Parses a JSON body, reporting problems as field-level validation errors.
fn parse<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ApiError> {
    let raw = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}".as_slice()
    } else {
        bytes
    };
    serde_json::from_slice(raw).map_err(|e| {
        let msg = e.to_string();
        // serde's messages name the offending field in backticks
        let field = msg.split('`').nth(1).unwrap_or("body").to_string();
        ApiError::Registry(RegistryError::Validation(vec![FieldError::new(field, msg)]))
    })
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, RegistryError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(ApiError::from)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub dsl: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndoRequest {
    #[serde(default)]
    pub target_uri: Option<ImageUri>,
}

#[derive(Serialize)]
struct SessionView {
    #[serde(flatten)]
    record: crate::registry::SessionRecord,
    head_uri: Option<ImageUri>,
    turns_committed: usize,
}

async fn create(State(st): State<AppState>, raw: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse(&raw)?;
    let reg = st.registry.clone();
    let out = blocking(move || reg.create(&req)).await?;
    Ok((StatusCode::CREATED, Json(out)).into_response())
}

async fn list(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({"sessions": st.registry.list()}))
}

async fn show(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let entry = st.registry.get(&id)?;
    let g = entry.graph();
    Ok(Json(SessionView {
        record: entry.record(),
        head_uri: g.head_uri.clone(),
        turns_committed: g.actions.len(),
    })
    .into_response())
}

async fn turn(State(st): State<AppState>, Path(id): Path<String>, raw: Bytes) -> Result<Response, ApiError> {
    let req: TurnRequest = parse(&raw)?;
    let text = if req.instruction.trim().is_empty() {
        req.dsl.clone().unwrap_or_default()
    } else {
        req.instruction
    };
    let instr = Instruction { text, dsl: req.dsl };
    let reg = st.registry.clone();
    let job = tokio::task::spawn_blocking(move || reg.turn(&id, &instr));
    match tokio::time::timeout(st.turn_timeout, job).await {
        Err(_) => Err(ApiError::Timeout(st.turn_timeout)),
        Ok(joined) => {
            let out = joined.map_err(|e| ApiError::Internal(e.to_string()))??;
            Ok(Json(out).into_response())
        }
    }
}

async fn graph(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let g = st.registry.get(&id)?.graph();
    Ok(Json(&*g).into_response())
}

async fn undo(State(st): State<AppState>, Path(id): Path<String>, raw: Bytes) -> Result<Response, ApiError> {
    let req: UndoRequest = parse(&raw)?;
    let reg = st.registry.clone();
    let out = blocking(move || reg.undo(&id, req.target_uri.as_ref())).await?;
    Ok(Json(out).into_response())
}

async fn close(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let reg = st.registry.clone();
    Ok(Json(blocking(move || reg.close(&id)).await?).into_response())
}

async fn metrics(State(st): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let reg = st.registry.clone();
    Ok(Json(blocking(move || reg.metrics(&id)).await?).into_response())
}

async fn image(State(st): State<AppState>, Path(uri): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    let uri = ImageUri(uri);
    let etag = format!("\"{uri}\"");
    let cache = HeaderValue::from_static("public, max-age=31536000, immutable");
    if headers.get(header::IF_NONE_MATCH).and_then(|v| v.to_str().ok()) == Some(etag.as_str()) && uri.is_well_formed() {
        return Ok((StatusCode::NOT_MODIFIED, [(header::CACHE_CONTROL, cache)]).into_response());
    }
    let reg = st.registry.clone();
    let png = blocking(move || reg.image(&uri)).await?;
    Ok((
        [
            (header::CONTENT_TYPE, HeaderValue::from_static("image/png")),
            (header::CACHE_CONTROL, cache),
            (header::ETAG, HeaderValue::from_str(&etag).expect("uri is header-safe")),
        ],
        png,
    )
        .into_response())
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok"}))
}

async fn fallback() -> Response {
    body(StatusCode::NOT_FOUND, "not_found", "no such route".into(), None)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/turns", post(turn))
        .route("/sessions/{id}/graph", get(graph))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/close", post(close))
        .route("/sessions/{id}/metrics", get(metrics))
        .route("/images/{uri}", get(image))
        .fallback(fallback)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

/// A server on its own runtime thread, for embedding and tests. Dropping
/// the handle stops it.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn spawn(addr: &str, state: AppState) -> std::io::Result<ServerHandle> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let listener = rt.block_on(TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let _ = rt.block_on(serve(listener, state, async {
            let _ = rx.await;
        }));
    });
    Ok(ServerHandle {
        addr,
        stop: Some(tx),
        thread: Some(thread),
    })
}
