//! Live detection service.
//!
//! | Method | Path | Body / query |
//! |---|---|---|
//! | POST | `/sessions` | `{"mode", "device_metadata"?}` |
//! | GET | `/sessions/{id}` | |
//! | DELETE | `/sessions/{id}` | idempotent |
//! | POST | `/sessions/{id}/mode` | `{"mode"}` |
//! | POST | `/sessions/{id}/metadata` | `{"species_category"?, "environment_notes"?, "location"?: {"lat", "lon"}}` |
//! | GET | `/sessions/{id}/events` | logged detection events |
//! | GET | `/recordings` | `from`, `to` (RFC 3339), `species`, `detected` |
//! | GET | `/recordings/{id}` | `format=wav` returns the audio |
//! | GET (upgrade) | `/sessions/{id}/stream` | binary PCM16LE in, JSON [`Frame`]s out |
//!
//! On the socket a client may also send `{"type":"flush"}`; the reply
//! `{"type":"flushed"}` arrives after every earlier chunk has been processed,
//! so a client can close the session knowing its audio is in.
//!
//! Errors are JSON `{"code", "message"}` with an HTTP status.

pub mod db;
pub mod frames;
pub mod session;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::mpsc::unbounded_channel;
use wingbeat_core::pipeline::TwoStageModel;
use wingbeat_core::stream::{DetectionEvent, StreamConfig, StreamMode};

use self::db::{Db, Location, MetadataRow, RecordingFilter, RecordingView, SessionRow, SessionState};
use self::frames::{ClientFrame, ErrorCode, Frame};
use self::session::{Ingest, SessionHandle};
use crate::error::{io_err, Error, Result};

pub const DB_FILE: &str = "wingbeat.sqlite";

pub const DEFAULT_SPECIES_VOCABULARY: [&str; 8] = [
    "Aedes aegypti",
    "Anopheles quadrimaculatus",
    "Culex tarsalis",
    "Anopheles albimanus",
    "Culex quinquefasciatus",
    "Aedes albopictus",
    "Anopheles gambiae",
    "unknown",
];

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub data_dir: PathBuf,
    /// Stream settings for new sessions; the mode comes from each request.
    pub stream: StreamConfig,
    pub species_vocabulary: Vec<String>,
    pub model_version: String,
    /// Pending-audio fraction of the ring at which clients get a backpressure frame.
    pub backpressure_ratio: f64,
}

impl ServiceConfig {
    pub fn new(data_dir: PathBuf) -> Self {
        Self {
            data_dir,
            stream: StreamConfig::default(),
            species_vocabulary: DEFAULT_SPECIES_VOCABULARY.iter().map(|s| s.to_string()).collect(),
            model_version: "unversioned".into(),
            backpressure_ratio: 0.8,
        }
    }
}

pub struct AppState {
    model: Arc<TwoStageModel>,
    config: ServiceConfig,
    db: Arc<Mutex<Db>>,
    sessions: Mutex<HashMap<String, Arc<SessionHandle>>>,
    counter: AtomicU64,
}

impl AppState {
    /// Opens the data directory and closes sessions an earlier process left open.
    pub fn open(model: TwoStageModel, config: ServiceConfig) -> Result<Arc<Self>> {
        config.stream.validate()?;
        std::fs::create_dir_all(&config.data_dir).map_err(io_err(&config.data_dir))?;
        let db = Db::open(&config.data_dir.join(DB_FILE))?;
        let abandoned = db.close_abandoned(now_ms())?;
        if abandoned > 0 {
            tracing::warn!(abandoned, "closed sessions left open by an earlier run");
        }
        Ok(Arc::new(Self {
            model: Arc::new(model),
            config,
            db: Arc::new(Mutex::new(db)),
            sessions: Mutex::new(HashMap::new()),
            counter: AtomicU64::new(0),
        }))
    }

    fn db(&self) -> std::sync::MutexGuard<'_, Db> {
        self.db.lock().expect("db lock")
    }

    fn handle(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.lock().expect("sessions lock").get(id).cloned()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/mode", post(set_mode))
        .route("/sessions/{id}/metadata", post(submit_metadata))
        .route("/sessions/{id}/events", get(session_events))
        .route("/sessions/{id}/stream", get(stream_socket))
        .route("/recordings", get(list_recordings))
        .route("/recordings/{id}", get(get_recording))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

fn now_ms() -> i64 {
    chrono::Utc::now().timestamp_millis()
}

#[derive(Debug, Serialize)]
struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    code: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    vocabulary: Option<Vec<String>>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
            vocabulary: None,
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "validation", message)
    }

    fn not_found(what: &str, id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no {what} `{id}`"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Core(wingbeat_core::Error::SessionClosed) => {
                Self::new(StatusCode::CONFLICT, "session_closed", "session is closed")
            }
            Error::Core(e @ (wingbeat_core::Error::Config(_) | wingbeat_core::Error::Validation(_))) => {
                Self::validation(e.to_string())
            }
            other => {
                tracing::error!(error = %other, "request failed");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string())
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::validation(format!("invalid request body: {e}")))
}

#[derive(Deserialize)]
struct CreateSession {
    mode: StreamMode,
    #[serde(default)]
    device_metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub mode: StreamMode,
    pub state: SessionState,
    pub created_at: String,
    pub created_at_ms: i64,
    pub device_metadata: serde_json::Value,
    pub model_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<MetadataRow>,
}

fn rfc3339(ms: i64) -> String {
    chrono::DateTime::from_timestamp_millis(ms)
        .map(|t| t.to_rfc3339_opts(chrono::SecondsFormat::Millis, true))
        .unwrap_or_default()
}

fn session_view(state: &AppState, id: &str) -> ApiResult<SessionView> {
    let db = state.db();
    let row = db.session(id)?.ok_or_else(|| ApiError::not_found("session", id))?;
    Ok(SessionView {
        session_id: row.id,
        mode: row.mode,
        state: row.state,
        created_at: rfc3339(row.created_at_ms),
        created_at_ms: row.created_at_ms,
        device_metadata: row.device_metadata,
        model_version: row.model_version,
        metadata: db.metadata(id)?,
    })
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let req: CreateSession = parse_body(&body)?;
    let created_at_ms = now_ms();
    let id = format!("s{created_at_ms}-{}", state.counter.fetch_add(1, Ordering::SeqCst));
    let config = StreamConfig {
        mode: req.mode,
        ..state.config.stream.clone()
    };
    state.db().insert_session(&SessionRow {
        id: id.clone(),
        mode: req.mode,
        state: SessionState::Open,
        created_at_ms,
        closed_at_ms: None,
        device_metadata: req.device_metadata,
        model_version: state.config.model_version.clone(),
    })?;
    let handle = SessionHandle::spawn(
        id.clone(),
        created_at_ms,
        state.model.clone(),
        config,
        state.db.clone(),
        state.config.data_dir.clone(),
    )?;
    state.sessions.lock().expect("sessions lock").insert(id.clone(), handle);
    tracing::info!(session = %id, mode = ?req.mode, "session created");
    Ok((StatusCode::CREATED, Json(session_view(&state, &id)?)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    Ok(Json(session_view(&state, &id)?))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClosedSession {
    pub session_id: String,
    pub state: SessionState,
    pub recordings: Vec<String>,
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ClosedSession>> {
    let recordings = match state.handle(&id) {
        Some(handle) => handle.close().await?,
        None => {
            if state.db().session(&id)?.is_none() {
                return Err(ApiError::not_found("session", &id));
            }
            state.db().session_recordings(&id)?
        }
    };
    Ok(Json(ClosedSession {
        session_id: id,
        state: SessionState::Closed,
        recordings,
    }))
}

#[derive(Deserialize)]
struct ModeRequest {
    mode: StreamMode,
}

async fn set_mode(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let req: ModeRequest = parse_body(&body)?;
    match state.handle(&id) {
        Some(handle) => handle.set_mode(req.mode).await?,
        None if state.db().session(&id)?.is_some() => {
            return Err(Error::from(wingbeat_core::Error::SessionClosed).into())
        }
        None => return Err(ApiError::not_found("session", &id)),
    }
    Ok(Json(session_view(&state, &id)?))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataRequest {
    species_category: Option<String>,
    environment_notes: Option<String>,
    location: Option<Location>,
}

async fn submit_metadata(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<SessionView>> {
    let req: MetadataRequest = parse_body(&body)?;
    if state.db().session(&id)?.is_none() {
        return Err(ApiError::not_found("session", &id));
    }
    let vocabulary = &state.config.species_vocabulary;
    let species = match req.species_category {
        None => None,
        Some(s) => match vocabulary.iter().find(|v| v.eq_ignore_ascii_case(s.trim())) {
            Some(v) => Some(v.clone()),
            None => {
                return Err(ApiError {
                    vocabulary: Some(vocabulary.clone()),
                    ..ApiError::validation(format!(
                        "species_category `{s}` is not one of: {}",
                        vocabulary.join(", ")
                    ))
                })
            }
        },
    };
    if let Some(l) = req.location {
        if !((-90.0..=90.0).contains(&l.lat) && (-180.0..=180.0).contains(&l.lon)) {
            return Err(ApiError::validation(format!(
                "location ({}, {}) out of range",
                l.lat, l.lon
            )));
        }
    }
    state.db().upsert_metadata(
        &id,
        &MetadataRow {
            species_category: species,
            environment_notes: req.environment_notes,
            location: req.location,
            submitted_at_ms: now_ms(),
        },
    )?;
    Ok(Json(session_view(&state, &id)?))
}

async fn session_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<DetectionEvent>>> {
    let db = state.db();
    if db.session(&id)?.is_none() {
        return Err(ApiError::not_found("session", &id));
    }
    Ok(Json(db.events(&id)?))
}

#[derive(Deserialize)]
struct ListQuery {
    from: Option<String>,
    to: Option<String>,
    species: Option<String>,
    detected: Option<bool>,
}

fn parse_time(name: &str, value: Option<&str>) -> ApiResult<Option<i64>> {
    value
        .map(|v| {
            chrono::DateTime::parse_from_rfc3339(v)
                .map(|t| t.timestamp_millis())
                .map_err(|e| ApiError::validation(format!("`{name}` must be RFC 3339: {e}")))
        })
        .transpose()
}

async fn list_recordings(
    State(state): State<Arc<AppState>>,
    Query(q): Query<ListQuery>,
) -> ApiResult<Json<Vec<RecordingView>>> {
    let filter = RecordingFilter {
        from_ms: parse_time("from", q.from.as_deref())?,
        to_ms: parse_time("to", q.to.as_deref())?,
        species_category: q.species,
        detected: q.detected,
    };
    Ok(Json(state.db().recordings(&filter)?))
}

#[derive(Deserialize)]
struct RecordingQuery {
    format: Option<String>,
}

async fn get_recording(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RecordingQuery>,
) -> ApiResult<Response> {
    let view = state
        .db()
        .recording(&id)?
        .ok_or_else(|| ApiError::not_found("recording", &id))?;
    match q.format.as_deref() {
        None | Some("json") => Ok(Json(view).into_response()),
        Some("wav") => {
            let path = state.config.data_dir.join(&view.recording.path);
            let bytes = std::fs::read(&path).map_err(io_err(path))?;
            Ok(([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response())
        }
        Some(other) => Err(ApiError::validation(format!(
            "unknown format `{other}`; use json or wav"
        ))),
    }
}

async fn stream_socket(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> ApiResult<Response> {
    let handle = state.handle(&id);
    if handle.is_none() && state.db().session(&id)?.is_none() {
        return Err(ApiError::not_found("session", &id));
    }
    let ratio = state.config.backpressure_ratio;
    Ok(ws.on_upgrade(move |socket| run_socket(socket, handle, ratio)))
}

fn decode_pcm(bytes: &[u8]) -> Option<Vec<i16>> {
    bytes.len().is_multiple_of(2).then(|| {
        bytes
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]))
            .collect()
    })
}

async fn run_socket(socket: WebSocket, handle: Option<Arc<SessionHandle>>, backpressure_ratio: f64) {
    let (mut sink, mut incoming) = socket.split();
    let (out, mut frames) = unbounded_channel::<Frame>();
    let writer = tokio::spawn(async move {
        while let Some(frame) = frames.recv().await {
            let last = matches!(frame, Frame::Closed { .. });
            if sink.send(Message::Text(frame.to_json().into())).await.is_err() {
                return;
            }
            if last {
                break;
            }
        }
        let _ = sink.send(Message::Close(None)).await;
    });

    let closed_frame = || Frame::error(ErrorCode::SessionClosed, "session is closed");
    let handle = match handle {
        Some(h) if h.subscribe(out.clone()) => h,
        _ => {
            let _ = out.send(closed_frame());
            let _ = out.send(Frame::Closed { recordings: Vec::new() });
            drop(out);
            let _ = writer.await;
            return;
        }
    };

    while let Some(Ok(msg)) = incoming.next().await {
        match msg {
            Message::Binary(bytes) => {
                let Some(pcm) = decode_pcm(&bytes) else {
                    let _ = out.send(Frame::error(
                        ErrorCode::BadFrame,
                        "PCM16 frames need an even byte count",
                    ));
                    continue;
                };
                match handle.ingest(pcm) {
                    Ingest::Accepted { fill_ratio } if fill_ratio >= backpressure_ratio => {
                        let _ = out.send(Frame::Backpressure { fill_ratio });
                    }
                    Ingest::Accepted { .. } => {}
                    Ingest::Overflow { dropped } => {
                        let _ = out.send(Frame::Error {
                            code: ErrorCode::Overflow,
                            message: format!("ring buffer full, dropped {dropped} samples"),
                            dropped: Some(dropped),
                        });
                    }
                    Ingest::Closed => {
                        let _ = out.send(closed_frame());
                    }
                }
            }
            Message::Text(text) => match serde_json::from_str::<ClientFrame>(text.as_str()) {
                Ok(ClientFrame::Flush) => {
                    if !handle.flush(out.clone()) {
                        let _ = out.send(closed_frame());
                    }
                }
                Err(_) => {
                    let _ = out.send(Frame::error(
                        ErrorCode::BadFrame,
                        "send audio as binary PCM16LE frames and control as {\"type\":\"flush\"}",
                    ));
                }
            },
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => {}
        }
        if writer.is_finished() {
            break;
        }
    }
    writer.abort();
}
