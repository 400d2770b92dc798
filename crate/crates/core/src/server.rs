//! HTTP surface of the assembly service and the management API.

use std::future::Future;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::cors::CorsLayer;

use crate::assembly::{AssemblyService, ExportError, IngestError};
use crate::management::{
    compute_funnel, HealthPoller, HealthStatus, JournalRecord, Management, RegistryError,
    RewardDecision, VerifyError,
};
use crate::protocol::decode_envelope;

pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub type Clock = Arc<dyn Fn() -> u64 + Send + Sync>;

#[derive(Clone)]
pub struct AppState {
    pub assembly: Arc<AssemblyService>,
    pub mgmt: Arc<Management>,
    pub health: Arc<RwLock<Vec<HealthStatus>>>,
    pub clock: Clock,
}

impl AppState {
    pub fn new(assembly: Arc<AssemblyService>, mgmt: Arc<Management>) -> Self {
        Self {
            assembly,
            mgmt,
            health: Arc::new(RwLock::new(Vec::new())),
            clock: Arc::new(now_ms),
        }
    }

    fn now(&self) -> u64 {
        (self.clock)()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodeBody {
    pub code: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AssignRequest {
    pub participant_id: String,
    /// Defaults to `s-{participant_id}`.
    #[serde(default)]
    pub session_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum VerifyResponse {
    Rewarded { reward: RewardDecision },
    Rejected { reason: String },
}

struct ApiError(StatusCode, serde_json::Value);

impl ApiError {
    fn new(code: StatusCode, msg: impl ToString) -> Self {
        ApiError(code, json!({ "error": msg.to_string() }))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

impl From<ExportError> for ApiError {
    fn from(e: ExportError) -> Self {
        let code = match e {
            ExportError::UnknownSession(_) => StatusCode::NOT_FOUND,
            ExportError::NotReady { .. } => StatusCode::CONFLICT,
            ExportError::Corrupt(_) | ExportError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(code, e)
    }
}

fn csv_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> T + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
}

async fn post_message(State(st): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let env = decode_envelope(&body).map_err(|e| {
        ApiError(
            StatusCode::BAD_REQUEST,
            json!({ "error": e.msg, "path": e.path }),
        )
    })?;
    let now = st.now();
    let result = blocking(move || st.assembly.ingest_envelope(&env, now)).await?;
    match result {
        Ok(ack) => Ok(Json(ack).into_response()),
        Err(e @ IngestError::Conflict(_)) => Err(ApiError::new(StatusCode::CONFLICT, e)),
        Err(e @ (IngestError::UnknownSession(_) | IngestError::SessionScopedStream)) => {
            Err(ApiError::new(StatusCode::BAD_REQUEST, e))
        }
        Err(e @ IngestError::Storage(_)) => {
            Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
        }
    }
}

async fn health(State(st): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "uptime_s": st.assembly.uptime_s() }))
}

async fn status(State(st): State<AppState>) -> Response {
    Json(st.assembly.service_status()).into_response()
}

async fn sessions(State(st): State<AppState>) -> Response {
    Json(st.assembly.sessions()).into_response()
}

async fn events_csv(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let bytes = blocking(move || st.assembly.export_events_csv(&id)).await??;
    Ok(csv_response(bytes))
}

async fn trial_csv(
    State(st): State<AppState>,
    Path((id, trial)): Path<(String, u32)>,
) -> Result<Response, ApiError> {
    let bytes = blocking(move || st.assembly.export_trial_csv(&id, trial)).await??;
    Ok(csv_response(bytes))
}

async fn challenge(
    State(st): State<AppState>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let now = st.now();
    let ch = blocking(move || st.assembly.issue_challenge(&id, now)).await??;
    Ok(Json(ch).into_response())
}

async fn complete(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<CodeBody>,
) -> Result<Response, ApiError> {
    let now = st.now();
    let verified = blocking(move || st.assembly.complete_session(&id, &body.code, now)).await??;
    Ok(Json(json!({ "verified": verified })).into_response())
}

async fn assign(
    State(st): State<AppState>,
    Json(req): Json<AssignRequest>,
) -> Result<Response, ApiError> {
    let now = st.now();
    let st2 = st.clone();
    let rec = blocking(move || {
        let session_id = req
            .session_id
            .unwrap_or_else(|| format!("s-{}", req.participant_id));
        let rec = st
            .mgmt
            .registry()
            .assign(&req.participant_id, &session_id, now)?;
        st.assembly
            .register_session(&rec.session_id, &rec.participant_id, &rec.treatment, now)
            .map_err(|e| RegistryError::Journal {
                path: "storage".into(),
                msg: e.to_string(),
            })?;
        Ok::<_, RegistryError>(rec)
    })
    .await?;
    match rec {
        Ok(rec) => Ok(Json(rec).into_response()),
        Err(RegistryError::DuplicateParticipant(pid)) => {
            let existing = st2.mgmt.registry().participant(&pid);
            Err(ApiError(
                StatusCode::CONFLICT,
                json!({ "error": format!("participant {pid} is already assigned"), "existing": existing }),
            ))
        }
        Err(e @ RegistryError::DuplicateSession(_)) => Err(ApiError::new(StatusCode::CONFLICT, e)),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e)),
    }
}

async fn funnel(State(st): State<AppState>) -> Response {
    Json(compute_funnel(&st.assembly.sessions())).into_response()
}

async fn participants(State(st): State<AppState>) -> Response {
    Json(st.mgmt.participants()).into_response()
}

async fn mgmt_health(State(st): State<AppState>) -> Response {
    Json(st.health.read().clone()).into_response()
}

async fn verify(
    State(st): State<AppState>,
    Path(id): Path<String>,
    Json(body): Json<CodeBody>,
) -> Result<Response, ApiError> {
    let now = st.now();
    let result = blocking(move || {
        st.mgmt
            .verify_and_reward(st.assembly.as_ref(), &id, &body.code, now)
    })
    .await?;
    match result {
        Ok(reward) => Ok(Json(VerifyResponse::Rewarded { reward }).into_response()),
        Err(VerifyError::Rejected(r)) => Ok(Json(VerifyResponse::Rejected {
            reason: r.to_string(),
        })
        .into_response()),
        Err(e @ VerifyError::Client(_)) => Err(ApiError::new(StatusCode::BAD_GATEWAY, e)),
        Err(e @ VerifyError::Registry(_)) => {
            Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e))
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/messages", post(post_message))
        .route("/v1/health", get(health))
        .route("/v1/status", get(status))
        .route("/v1/sessions", get(sessions))
        .route("/v1/sessions/{id}/events.csv", get(events_csv))
        .route(
            "/v1/sessions/{id}/trials/{k}/trajectory.csv",
            get(trial_csv),
        )
        .route("/v1/sessions/{id}/challenge", post(challenge))
        .route("/v1/sessions/{id}/complete", post(complete))
        .route("/v1/mgmt/assign", post(assign))
        .route("/v1/mgmt/funnel", get(funnel))
        .route("/v1/mgmt/participants", get(participants))
        .route("/v1/mgmt/health", get(mgmt_health))
        .route("/v1/mgmt/sessions/{id}/verify", post(verify))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Debug, Clone)]
pub struct BackgroundConfig {
    pub sweep_every: Duration,
    /// Targets for `/v1/mgmt/health`; empty disables the poller.
    pub health_targets: Vec<String>,
    pub health_interval: Duration,
    pub health_threshold: u32,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            sweep_every: Duration::from_secs(60),
            health_targets: Vec::new(),
            health_interval: Duration::from_secs(2),
            health_threshold: crate::management::health::DEFAULT_THRESHOLD,
        }
    }
}

/// Periodic idle sweep and health polling. Alarms are journaled.
pub fn spawn_background(
    state: &AppState,
    cfg: BackgroundConfig,
) -> Vec<tokio::task::JoinHandle<()>> {
    let mut tasks = Vec::new();
    let st = state.clone();
    tasks.push(tokio::spawn(async move {
        let mut tick = tokio::time::interval(cfg.sweep_every);
        tick.tick().await;
        loop {
            tick.tick().await;
            let now = st.now();
            let a = st.assembly.clone();
            match tokio::task::spawn_blocking(move || a.sweep_idle(now)).await {
                Ok(Ok(swept)) if !swept.is_empty() => {
                    tracing::info!(count = swept.len(), "abandoned idle sessions");
                }
                Ok(Err(e)) => tracing::error!(%e, "idle sweep failed"),
                _ => {}
            }
        }
    }));
    if !cfg.health_targets.is_empty() {
        let st = state.clone();
        let timeout = cfg.health_interval.min(Duration::from_secs(2));
        if let Ok(mut poller) =
            HealthPoller::new(&cfg.health_targets, cfg.health_threshold, timeout)
        {
            *st.health.write() = poller.statuses();
            tasks.push(tokio::spawn(async move {
                let mut tick = tokio::time::interval(cfg.health_interval);
                loop {
                    tick.tick().await;
                    let alarms = poller.tick(st.now()).await;
                    *st.health.write() = poller.statuses();
                    for a in alarms {
                        tracing::warn!(target = %a.target, "service unreachable");
                        let rec = JournalRecord::Alarm {
                            ts_ms: a.ts_ms,
                            target: a.target,
                            consecutive_failures: a.consecutive_failures,
                        };
                        if let Err(e) = st.mgmt.registry().record(rec) {
                            tracing::error!(%e, "journaling alarm failed");
                        }
                    }
                }
            }));
        }
    }
    tasks
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}
