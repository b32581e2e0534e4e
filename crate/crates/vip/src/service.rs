//! HTTP+JSON session service.
//!
//! | method | path | success |
//! |--------|------|---------|
//! | POST | `/v1/sessions` | 201 snapshot |
//! | GET | `/v1/sessions/{id}` | 200 snapshot |
//! | POST | `/v1/sessions/{id}/answers` | 200 snapshot |
//! | DELETE | `/v1/sessions/{id}` | 204 |
//! | GET | `/v1/checkpoints` | 200 list |
//!
//! Errors are `{"error": code, "message": text}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use vip_core::networks::Checkpoint;
use vip_core::query::AnswerDomain;

use crate::session::{ApiError, ErrorCode, Session, Snapshot};

pub const DEFAULT_PORT: u16 = 8650;
pub const PORT_ENV: &str = "VIP_PORT";

/// `VIP_PORT` if set and valid, else the default.
pub fn port_from_env() -> u16 {
    std::env::var(PORT_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_PORT)
}

pub struct AppState {
    checkpoints: BTreeMap<String, Arc<Checkpoint>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(checkpoints: impl IntoIterator<Item = (String, Checkpoint)>) -> Self {
        AppState {
            checkpoints: checkpoints.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            sessions: RwLock::new(HashMap::new()),
        }
    }

    /// Loads each file, keyed by its file stem.
    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> vip_core::Result<Self> {
        let mut out = Vec::new();
        for p in paths {
            let p = p.as_ref();
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            out.push((id, Checkpoint::load(p)?));
        }
        Ok(AppState::new(out))
    }

    pub fn checkpoint(&self, id: &str) -> Option<&Arc<Checkpoint>> {
        self.checkpoints.get(id)
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("no session {id:?}")))
    }

    pub fn create_session(&self, checkpoint: &str, stop: &str) -> Result<Snapshot, ApiError> {
        let ckpt = self
            .checkpoint(checkpoint)
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownCheckpoint, format!("no checkpoint {checkpoint:?}")))?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let session = Session::start(id.clone(), checkpoint, ckpt, stop)?;
        let snapshot = session.snapshot(ckpt);
        self.sessions
            .write()
            .expect("session table poisoned")
            .insert(id, Arc::new(Mutex::new(session)));
        Ok(snapshot)
    }

    pub fn get_session(&self, id: &str) -> Result<Snapshot, ApiError> {
        let session = self.session(id)?;
        let s = session.lock().expect("session poisoned");
        Ok(s.snapshot(&self.checkpoints[&s.checkpoint]))
    }

    pub fn submit_answer(&self, id: &str, query_id: usize, raw: &str) -> Result<Snapshot, ApiError> {
        let session = self.session(id)?;
        let mut s = session.lock().expect("session poisoned");
        let ckpt = Arc::clone(&self.checkpoints[&s.checkpoint]);
        s.answer(&ckpt, query_id, raw)?;
        Ok(s.snapshot(&ckpt))
    }

    pub fn delete_session(&self, id: &str) -> Result<(), ApiError> {
        self.sessions
            .write()
            .expect("session table poisoned")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownSession, format!("no session {id:?}")))
    }

    pub fn list_checkpoints(&self) -> Vec<CheckpointInfo> {
        self.checkpoints
            .iter()
            .map(|(id, c)| CheckpointInfo {
                id: id.clone(),
                num_queries: c.queries.len(),
                num_labels: c.labels.len(),
                queries: c
                    .queries
                    .queries()
                    .iter()
                    .map(|q| QueryInfo {
                        id: q.id,
                        name: q.name.clone(),
                        domain: q.domain,
                        answers: q
                            .domain
                            .values()
                            .iter()
                            .filter_map(|&v| q.domain.raw_token(v))
                            .map(str::to_string)
                            .collect(),
                    })
                    .collect(),
                labels: c.labels.clone(),
                config_fingerprint: c.config_fingerprint.clone(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryInfo {
    pub id: usize,
    pub name: String,
    pub domain: AnswerDomain,
    /// Raw answer tokens accepted for this query.
    pub answers: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub num_queries: usize,
    pub num_labels: usize,
    pub queries: Vec<QueryInfo>,
    pub labels: Vec<String>,
    pub config_fingerprint: String,
}

#[derive(Debug, Deserialize)]
pub struct CreateRequest {
    pub checkpoint: String,
    pub stop: String,
}

/// `value` may be a raw token string, a number, or a boolean.
#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub query_id: usize,
    pub value: Value,
}

fn raw_value(v: &Value) -> Result<String, ApiError> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Number(n) => Ok(match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.to_string(),
            (None, Some(f)) => f.to_string(),
            _ => n.to_string(),
        }),
        other => Err(ApiError::new(
            ErrorCode::IllegalAnswerValue,
            format!("answer must be a string, number or boolean, got {other}"),
        )),
    }
}

struct Failure(ApiError);

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure(e)
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.error.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, Failure> {
    serde_json::from_slice(body).map_err(|e| Failure(ApiError::new(ErrorCode::BadRequest, e.to_string())))
}

async fn create(State(state): State<Arc<AppState>>, body: Bytes) -> Result<(StatusCode, Json<Snapshot>), Failure> {
    let req: CreateRequest = parse_body(&body)?;
    Ok((StatusCode::CREATED, Json(state.create_session(&req.checkpoint, &req.stop)?)))
}

async fn snapshot(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<Snapshot>, Failure> {
    Ok(Json(state.get_session(&id)?))
}

async fn answer(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<Snapshot>, Failure> {
    // an unknown session outranks a malformed body
    state.session(&id)?;
    let req: AnswerRequest = parse_body(&body)?;
    let raw = raw_value(&req.value)?;
    Ok(Json(state.submit_answer(&id, req.query_id, &raw)?))
}

async fn delete(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, Failure> {
    state.delete_session(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn checkpoints(State(state): State<Arc<AppState>>) -> Json<Vec<CheckpointInfo>> {
    Json(state.list_checkpoints())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}", get(snapshot).delete(delete))
        .route("/v1/sessions/{id}/answers", post(answer))
        .route("/v1/checkpoints", get(checkpoints))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

/// Binds an ephemeral local port and serves in the background; returns the
/// bound address.
pub async fn spawn_local(state: Arc<AppState>) -> std::io::Result<SocketAddr> {
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", 0)).await?;
    let addr = listener.local_addr()?;
    tokio::spawn(async move {
        let _ = axum::serve(listener, router(state)).await;
    });
    Ok(addr)
}
