use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::buffer::{TrialBuffer, TrialStatus};

/// ```text
/// Onboarding -> InTrial -> Offboarding -> Completed
///      \            \            \
///       +------------+------------+--> Failed | Abandoned
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SessionState {
    Onboarding,
    InTrial,
    Offboarding,
    Completed,
    Failed,
    Abandoned,
}

impl SessionState {
    pub const ALL: [SessionState; 6] = [
        SessionState::Onboarding,
        SessionState::InTrial,
        SessionState::Offboarding,
        SessionState::Completed,
        SessionState::Failed,
        SessionState::Abandoned,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            SessionState::Completed | SessionState::Failed | SessionState::Abandoned
        )
    }

    /// State after a client event. Unrecognized names and transitions that
    /// are not on the chain leave the state unchanged.
    pub fn on_event(self, name: &str) -> SessionState {
        use SessionState::*;
        match (self, name) {
            (s, "onboarding_fail") if !s.is_terminal() => Failed,
            (Onboarding, "trial_start") => InTrial,
            (InTrial, "session_complete") => Offboarding,
            (s, _) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub ts_ms: u64,
    pub name: String,
    pub data: Map<String, Value>,
}

#[derive(Debug, Clone)]
pub struct SessionRecord {
    pub session_id: String,
    pub participant_id: String,
    pub treatment: String,
    pub os: String,
    pub browser: String,
    /// Set by the onboarding capability events.
    pub capable: Option<bool>,
    pub state: SessionState,
    pub events: Vec<EventRecord>,
    pub trials: BTreeMap<u32, TrialBuffer>,
    pub created_ts_ms: u64,
    pub updated_ts_ms: u64,
    /// When the session reached Offboarding.
    pub finished_ts_ms: Option<u64>,
}

impl SessionRecord {
    pub fn new(session_id: &str, now_ms: u64) -> Self {
        Self {
            session_id: session_id.to_string(),
            participant_id: String::new(),
            treatment: String::new(),
            os: String::new(),
            browser: String::new(),
            capable: None,
            state: SessionState::Onboarding,
            events: Vec::new(),
            trials: BTreeMap::new(),
            created_ts_ms: now_ms,
            updated_ts_ms: now_ms,
            finished_ts_ms: None,
        }
    }

    /// Appends the event, fills unset metadata from well-known data keys and
    /// advances the state machine.
    pub fn record_event(&mut self, ts_ms: u64, name: &str, data: &Map<String, Value>, now_ms: u64) {
        self.events.push(EventRecord {
            ts_ms,
            name: name.to_string(),
            data: data.clone(),
        });
        for (key, slot) in [
            ("participant_id", &mut self.participant_id),
            ("treatment", &mut self.treatment),
            ("os", &mut self.os),
            ("browser", &mut self.browser),
        ] {
            if slot.is_empty() {
                if let Some(Value::String(v)) = data.get(key) {
                    *slot = v.clone();
                }
            }
        }
        match name {
            "onboarding_pass" => self.capable = Some(true),
            "onboarding_fail" => self.capable = Some(false),
            _ => {}
        }
        let next = self.state.on_event(name);
        if next == SessionState::Offboarding && self.state != next {
            self.finished_ts_ms = Some(now_ms);
        }
        self.state = next;
        self.updated_ts_ms = now_ms;
    }

    pub fn reconstructed_trials(&self) -> Vec<u32> {
        self.trials
            .iter()
            .filter(|(_, b)| b.status == TrialStatus::Reconstructed)
            .map(|(k, _)| *k)
            .collect()
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.session_id.clone(),
            participant_id: self.participant_id.clone(),
            treatment: self.treatment.clone(),
            os: self.os.clone(),
            browser: self.browser.clone(),
            capable: self.capable,
            state: self.state,
            trials: self.trials.iter().map(|(k, b)| (*k, b.status)).collect(),
            created_ts_ms: self.created_ts_ms,
            updated_ts_ms: self.updated_ts_ms,
            finished_ts_ms: self.finished_ts_ms,
        }
    }

    pub(crate) fn meta(&self) -> SessionMeta {
        SessionMeta {
            session_id: self.session_id.clone(),
            participant_id: self.participant_id.clone(),
            treatment: self.treatment.clone(),
            os: self.os.clone(),
            browser: self.browser.clone(),
            capable: self.capable,
            state: self.state,
            created_ts_ms: self.created_ts_ms,
            updated_ts_ms: self.updated_ts_ms,
            finished_ts_ms: self.finished_ts_ms,
            reconstructed: self.reconstructed_trials(),
        }
    }

    pub(crate) fn from_meta(meta: SessionMeta, events: Vec<EventRecord>) -> Self {
        let trials = meta
            .reconstructed
            .iter()
            .map(|k| {
                let b = TrialBuffer {
                    status: TrialStatus::Reconstructed,
                    ..TrialBuffer::default()
                };
                (*k, b)
            })
            .collect();
        Self {
            session_id: meta.session_id,
            participant_id: meta.participant_id,
            treatment: meta.treatment,
            os: meta.os,
            browser: meta.browser,
            capable: meta.capable,
            state: meta.state,
            events,
            trials,
            created_ts_ms: meta.created_ts_ms,
            updated_ts_ms: meta.updated_ts_ms,
            finished_ts_ms: meta.finished_ts_ms,
        }
    }
}

/// Read-only view of a session, as served by `GET /v1/sessions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub participant_id: String,
    pub treatment: String,
    pub os: String,
    pub browser: String,
    pub capable: Option<bool>,
    pub state: SessionState,
    pub trials: BTreeMap<u32, TrialStatus>,
    pub created_ts_ms: u64,
    pub updated_ts_ms: u64,
    pub finished_ts_ms: Option<u64>,
}

/// Persisted next to a session's CSVs so a restarted service can rebuild
/// its registry from storage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SessionMeta {
    pub session_id: String,
    pub participant_id: String,
    pub treatment: String,
    pub os: String,
    pub browser: String,
    pub capable: Option<bool>,
    pub state: SessionState,
    pub created_ts_ms: u64,
    pub updated_ts_ms: u64,
    pub finished_ts_ms: Option<u64>,
    pub reconstructed: Vec<u32>,
}

#[cfg(test)]
mod tests {
    use super::SessionState::*;
    use super::*;

    #[test]
    fn happy_path() {
        let s = Onboarding
            .on_event("consent_given")
            .on_event("onboarding_pass")
            .on_event("trial_start")
            .on_event("trial_end")
            .on_event("trial_start")
            .on_event("session_complete");
        assert_eq!(s, Offboarding);
    }

    #[test]
    fn failure_from_any_non_terminal() {
        for s in [Onboarding, InTrial, Offboarding] {
            assert_eq!(s.on_event("onboarding_fail"), Failed);
        }
        for s in [Completed, Failed, Abandoned] {
            assert_eq!(s.on_event("onboarding_fail"), s);
            assert_eq!(s.on_event("trial_start"), s);
        }
    }

    #[test]
    fn off_chain_events_are_ignored() {
        assert_eq!(Onboarding.on_event("session_complete"), Onboarding);
        assert_eq!(Offboarding.on_event("trial_start"), Offboarding);
        assert_eq!(InTrial.on_event("mystery"), InTrial);
    }

    #[test]
    fn metadata_absorbed_once() {
        let mut r = SessionRecord::new("s", 10);
        let mut data = Map::new();
        data.insert("participant_id".into(), "p1".into());
        data.insert("os".into(), "Linux".into());
        r.record_event(1, "onboarding_pass", &data, 11);
        data.insert("participant_id".into(), "p2".into());
        r.record_event(2, "consent_given", &data, 12);
        assert_eq!(r.participant_id, "p1");
        assert_eq!(r.os, "Linux");
        assert_eq!(r.capable, Some(true));
        assert_eq!(r.events.len(), 2);
        assert_eq!(r.updated_ts_ms, 12);
    }
}
