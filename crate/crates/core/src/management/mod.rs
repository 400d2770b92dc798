//! Operations side of a running experiment: treatment assignment,
//! completion verification with reward payment, HIT creation, service
//! health monitoring and the participant funnel.

pub mod funnel;
pub mod health;
pub mod recruitment;
pub mod registry;

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

pub use funnel::{compute_funnel, FunnelCell, FunnelCounts, FunnelStats};
pub use health::{poll_health, Alarm, HealthPoller, HealthState, HealthStatus, HealthTracker};
pub use recruitment::{
    create_hits, ClientError, HitBook, HitError, HitSpec, MockRecruitmentClient, RecruitmentCall,
    RecruitmentClient,
};
pub use registry::{
    AssignmentStrategy, JournalRecord, ParticipantRecord, Registry, RegistryError, RewardDecision,
};

use crate::assembly::{AssemblyService, SessionState, SessionSummary};
use crate::completion::{verify_code, Challenge};
use crate::manifest::ExperimentManifest;

/// Where verification looks up session state and the issued challenge.
pub trait SessionDirectory: Send + Sync {
    fn session(&self, session_id: &str) -> Option<SessionSummary>;
    fn challenge(&self, session_id: &str) -> Option<Challenge>;
}

impl SessionDirectory for AssemblyService {
    fn session(&self, session_id: &str) -> Option<SessionSummary> {
        AssemblyService::session(self, session_id)
    }

    fn challenge(&self, session_id: &str) -> Option<Challenge> {
        AssemblyService::challenge(self, session_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPolicy {
    pub base_usd: f64,
    pub bonus_usd: f64,
    pub bonus_threshold_min: f64,
}

impl RewardPolicy {
    pub fn from_manifest(m: &ExperimentManifest) -> Self {
        Self {
            base_usd: m.reward_base_usd,
            bonus_usd: m.reward_bonus_usd,
            bonus_threshold_min: m.bonus_threshold_min,
        }
    }

    /// Bonus only when strictly faster than the threshold.
    pub fn decide(&self, duration_min: f64) -> RewardDecision {
        let bonus_usd = if duration_min < self.bonus_threshold_min {
            self.bonus_usd
        } else {
            0.0
        };
        RewardDecision {
            base_usd: self.base_usd,
            bonus_usd,
            total_usd: self.base_usd + bonus_usd,
            duration_min,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    BadCode,
    NotOffboarding,
    AlreadyRewarded,
    UnknownSession,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::BadCode => "bad_code",
            RejectReason::NotOffboarding => "not_offboarding",
            RejectReason::AlreadyRewarded => "already_rewarded",
            RejectReason::UnknownSession => "unknown_session",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("rejected: {0}")]
    Rejected(RejectReason),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Verification and payment. Each session's verify, pay and record steps
/// run under that session's lock, so the recruitment client sees at most
/// one payment per session however many requests race.
pub struct Management {
    registry: Arc<Registry>,
    client: Arc<dyn RecruitmentClient>,
    policy: RewardPolicy,
    salt: String,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Management {
    pub fn new(
        registry: Arc<Registry>,
        client: Arc<dyn RecruitmentClient>,
        policy: RewardPolicy,
        salt: &str,
    ) -> Self {
        Self {
            registry,
            client,
            policy,
            salt: salt.to_string(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn client(&self) -> &Arc<dyn RecruitmentClient> {
        &self.client
    }

    pub fn policy(&self) -> RewardPolicy {
        self.policy
    }

    fn session_lock(&self, session_id: &str) -> Arc<Mutex<()>> {
        self.locks
            .lock()
            .entry(session_id.to_string())
            .or_default()
            .clone()
    }

    pub fn verify_and_reward(
        &self,
        dir: &dyn SessionDirectory,
        session_id: &str,
        code: &str,
        now_ms: u64,
    ) -> Result<RewardDecision, VerifyError> {
        let lock = self.session_lock(session_id);
        let _guard = lock.lock();
        if self.registry.reward_for(session_id).is_some() {
            return Err(VerifyError::Rejected(RejectReason::AlreadyRewarded));
        }
        let Some(session) = dir.session(session_id) else {
            return Err(VerifyError::Rejected(RejectReason::UnknownSession));
        };
        if !matches!(
            session.state,
            SessionState::Offboarding | SessionState::Completed
        ) {
            return Err(VerifyError::Rejected(RejectReason::NotOffboarding));
        }
        let ok = dir
            .challenge(session_id)
            .is_some_and(|ch| verify_code(code, &ch, &self.salt));
        if !ok {
            self.registry.record(JournalRecord::Verify {
                ts_ms: now_ms,
                session_id: session_id.to_string(),
                ok: false,
                reason: Some(RejectReason::BadCode.to_string()),
            })?;
            return Err(VerifyError::Rejected(RejectReason::BadCode));
        }
        self.registry.record(JournalRecord::Verify {
            ts_ms: now_ms,
            session_id: session_id.to_string(),
            ok: true,
            reason: None,
        })?;
        let finished = session.finished_ts_ms.unwrap_or(session.updated_ts_ms);
        let duration_min = finished.saturating_sub(session.created_ts_ms) as f64 / 60_000.0;
        let decision = self.policy.decide(duration_min);
        self.client.approve(session_id)?;
        self.client.pay(session_id, decision.total_usd)?;
        self.registry.record(JournalRecord::Reward {
            ts_ms: now_ms,
            session_id: session_id.to_string(),
            decision: decision.clone(),
        })?;
        Ok(decision)
    }

    /// Participants known to the registry plus sessions that were verified
    /// without a prior assignment.
    pub fn participants(&self) -> Vec<ParticipantRecord> {
        let mut out = self.registry.participants();
        for (session_id, decision) in self.registry.rewarded_sessions() {
            if self.registry.participant_for_session(&session_id).is_none() {
                out.push(ParticipantRecord {
                    participant_id: String::new(),
                    session_id,
                    treatment: String::new(),
                    assignment_ts_ms: 0,
                    verified: true,
                    reward: Some(decision),
                });
            }
        }
        out
    }
}
