//! Typed client for the HTTP API.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::assembly::{IngestAck, ServiceStatus, SessionSummary};
use crate::completion::Challenge;
use crate::management::{FunnelStats, HealthStatus, ParticipantRecord};
use crate::protocol::{encode_envelope, WireEnvelope};
use crate::server::{AssignRequest, CodeBody, VerifyResponse};

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http {status}: {body}")]
    Status { status: u16, body: String },
    #[error("decoding response: {0}")]
    Decode(String),
}

impl ApiError {
    /// Worth retrying: the request may not have reached the service, or the
    /// service failed internally.
    pub fn is_transient(&self) -> bool {
        match self {
            ApiError::Transport(_) => true,
            ApiError::Status { status, .. } => *status >= 500,
            ApiError::Decode(_) => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ApiClient {
    base: String,
    http: reqwest::Client,
}

impl ApiClient {
    pub fn new(base: &str) -> Result<Self, ApiError> {
        Self::with_timeout(base, Duration::from_secs(30))
    }

    pub fn with_timeout(base: &str, timeout: Duration) -> Result<Self, ApiError> {
        let http = reqwest::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ApiError::Transport(e.to_string()))?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            http,
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.base, path)
    }

    async fn read(resp: reqwest::Response) -> Result<Vec<u8>, ApiError> {
        let status = resp.status();
        let body = resp
            .bytes()
            .await
            .map_err(|e| ApiError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(ApiError::Status {
                status: status.as_u16(),
                body: String::from_utf8_lossy(&body).into_owned(),
            });
        }
        Ok(body.to_vec())
    }

    async fn get_bytes(&self, path: &str) -> Result<Vec<u8>, ApiError> {
        let resp = self
            .http
            .get(self.url(path))
            .send()
            .await
            .map_err(|e| ApiError::Transport(e.to_string()))?;
        Self::read(resp).await
    }

    async fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T, ApiError> {
        let b = self.get_bytes(path).await?;
        serde_json::from_slice(&b).map_err(|e| ApiError::Decode(e.to_string()))
    }

    async fn post_raw<T: DeserializeOwned>(
        &self,
        path: &str,
        body: Vec<u8>,
    ) -> Result<T, ApiError> {
        let resp = self
            .http
            .post(self.url(path))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body)
            .send()
            .await
            .map_err(|e| ApiError::Transport(e.to_string()))?;
        let b = Self::read(resp).await?;
        serde_json::from_slice(&b).map_err(|e| ApiError::Decode(e.to_string()))
    }

    async fn post_json<B: Serialize, T: DeserializeOwned>(
        &self,
        path: &str,
        body: &B,
    ) -> Result<T, ApiError> {
        self.post_raw(path, serde_json::to_vec(body).expect("request serializes"))
            .await
    }

    pub async fn post_envelope(&self, e: &WireEnvelope) -> Result<IngestAck, ApiError> {
        self.post_raw("/v1/messages", encode_envelope(e)).await
    }

    pub async fn health(&self) -> Result<serde_json::Value, ApiError> {
        self.get_json("/v1/health").await
    }

    pub async fn status(&self) -> Result<ServiceStatus, ApiError> {
        self.get_json("/v1/status").await
    }

    pub async fn sessions(&self) -> Result<Vec<SessionSummary>, ApiError> {
        self.get_json("/v1/sessions").await
    }

    pub async fn events_csv(&self, session_id: &str) -> Result<Vec<u8>, ApiError> {
        self.get_bytes(&format!("/v1/sessions/{session_id}/events.csv"))
            .await
    }

    pub async fn trial_csv(&self, session_id: &str, trial: u32) -> Result<Vec<u8>, ApiError> {
        self.get_bytes(&format!(
            "/v1/sessions/{session_id}/trials/{trial}/trajectory.csv"
        ))
        .await
    }

    pub async fn challenge(&self, session_id: &str) -> Result<Challenge, ApiError> {
        self.post_json(
            &format!("/v1/sessions/{session_id}/challenge"),
            &serde_json::json!({}),
        )
        .await
    }

    pub async fn complete(&self, session_id: &str, code: &str) -> Result<bool, ApiError> {
        let v: serde_json::Value = self
            .post_json(
                &format!("/v1/sessions/{session_id}/complete"),
                &CodeBody { code: code.into() },
            )
            .await?;
        v.get("verified")
            .and_then(|v| v.as_bool())
            .ok_or_else(|| ApiError::Decode("missing verified".into()))
    }

    pub async fn assign(&self, participant_id: &str) -> Result<ParticipantRecord, ApiError> {
        let req = AssignRequest {
            participant_id: participant_id.into(),
            session_id: None,
        };
        self.post_json("/v1/mgmt/assign", &req).await
    }

    pub async fn funnel(&self) -> Result<FunnelStats, ApiError> {
        self.get_json("/v1/mgmt/funnel").await
    }

    pub async fn participants(&self) -> Result<Vec<ParticipantRecord>, ApiError> {
        self.get_json("/v1/mgmt/participants").await
    }

    pub async fn mgmt_health(&self) -> Result<Vec<HealthStatus>, ApiError> {
        self.get_json("/v1/mgmt/health").await
    }

    pub async fn verify(&self, session_id: &str, code: &str) -> Result<VerifyResponse, ApiError> {
        self.post_json(
            &format!("/v1/mgmt/sessions/{session_id}/verify"),
            &CodeBody { code: code.into() },
        )
        .await
    }
}
