//! The data-assembly service.
//!
//! Clients post envelopes for many sessions at once. Events are appended to
//! the session log and drive the participant state machine; header, chunk
//! and tail envelopes accumulate in a per-trial buffer. As soon as a buffer
//! holds its tail and every announced chunk, the payload is checked against
//! the tail CRC, and a matching trial is written to storage as a raw blob and
//! a CSV. Storage is the source of truth for exports, so trials written
//! before a restart remain exportable afterwards.
//!
//! Storage layout:
//!
//! ```text
//! sessions/{id}/session.json   session metadata and state
//! sessions/{id}/events.csv     session_id,ts_ms,name,data_json
//! sessions/{id}/trial_{k}.raw  reconstructed payload bytes
//! sessions/{id}/trial_{k}.csv  session_id,participant_id,treatment,trial,t,x,y,z,yaw,pitch
//! ```

pub mod buffer;
pub mod session;
pub mod storage;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

pub use buffer::{
    try_reconstruct, ConflictError, Incomplete, MismatchReport, Reconstruction, TrialBuffer,
    TrialStatus,
};
pub use session::{EventRecord, SessionRecord, SessionState, SessionSummary};
pub use storage::{LocalDirStorage, MemoryStorage, StorageBackend, StorageError};

use crate::completion::{verify_code, Challenge, ChallengeStore};
use crate::protocol::{decode_trajectory, Body, TrajectorySample, WireEnvelope};
use session::SessionMeta;

pub const TRIAL_CSV_HEADER: [&str; 10] = [
    "session_id",
    "participant_id",
    "treatment",
    "trial",
    "t",
    "x",
    "y",
    "z",
    "yaw",
    "pitch",
];
pub const EVENTS_CSV_HEADER: [&str; 4] = ["session_id", "ts_ms", "name", "data_json"];

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error(transparent)]
    Conflict(#[from] ConflictError),
    #[error("trajectory streams must use a trial number >= 1")]
    SessionScopedStream,
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("trial {trial} is not reconstructed (status {status:?})")]
    NotReady {
        trial: u32,
        status: Option<TrialStatus>,
    },
    #[error("stored data is corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Storage(#[from] StorageError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAck {
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trial_status: Option<TrialStatus>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub uptime_s: u64,
    pub sessions_total: u64,
    pub sessions_by_state: BTreeMap<SessionState, u64>,
    pub trials_reconstructed: u64,
    pub bytes_ingested: u64,
}

#[derive(Debug, Clone)]
pub struct AssemblyConfig {
    /// Reject envelopes for sessions that were not registered first.
    pub require_registration: bool,
    /// Idle time after which an unfinished session is marked abandoned.
    pub idle_timeout_ms: u64,
    /// Researcher salt for completion codes.
    pub salt: String,
    /// Seed for challenge nonces; `None` draws from the OS.
    pub challenge_seed: Option<u64>,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self {
            require_registration: false,
            idle_timeout_ms: 60 * 60 * 1000,
            salt: String::new(),
            challenge_seed: None,
        }
    }
}

pub fn trial_key(session_id: &str, trial: u32, ext: &str) -> String {
    format!("sessions/{session_id}/trial_{trial}.{ext}")
}

pub fn events_key(session_id: &str) -> String {
    format!("sessions/{session_id}/events.csv")
}

fn meta_key(session_id: &str) -> String {
    format!("sessions/{session_id}/session.json")
}

fn challenge_key(session_id: &str) -> String {
    format!("sessions/{session_id}/challenge.json")
}

pub fn trial_csv(
    session_id: &str,
    participant_id: &str,
    treatment: &str,
    trial: u32,
    samples: &[TrajectorySample],
) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRIAL_CSV_HEADER).expect("in-memory csv");
    let trial = trial.to_string();
    for s in samples {
        let nums = [s.t, s.x, s.y, s.z, s.yaw, s.pitch].map(|v| format!("{v:.6}"));
        let mut row = vec![session_id, participant_id, treatment, trial.as_str()];
        row.extend(nums.iter().map(String::as_str));
        w.write_record(&row).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn events_csv(r: &SessionRecord) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(EVENTS_CSV_HEADER).expect("in-memory csv");
    for e in &r.events {
        let data = serde_json::to_string(&e.data).expect("json map");
        w.write_record([r.session_id.as_str(), &e.ts_ms.to_string(), &e.name, &data])
            .expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn parse_events_csv(bytes: &[u8]) -> Result<Vec<EventRecord>, String> {
    let mut rdr = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| e.to_string())?;
        let ts_ms = row[1]
            .parse()
            .map_err(|_| format!("bad ts_ms {:?}", &row[1]))?;
        let data = serde_json::from_str(&row[3]).map_err(|e| e.to_string())?;
        out.push(EventRecord {
            ts_ms,
            name: row[2].to_string(),
            data,
        });
    }
    Ok(out)
}

/// Thread-safe assembly service core. The HTTP layer is a thin wrapper.
pub struct AssemblyService {
    config: AssemblyConfig,
    storage: Arc<dyn StorageBackend>,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionRecord>>>>,
    challenges: ChallengeStore,
    rng: Mutex<ChaCha20Rng>,
    trials_reconstructed: AtomicU64,
    bytes_ingested: AtomicU64,
    started: Instant,
}

impl AssemblyService {
    pub fn new(config: AssemblyConfig, storage: Arc<dyn StorageBackend>) -> Self {
        let rng = match config.challenge_seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_os_rng(),
        };
        Self {
            config,
            storage,
            sessions: RwLock::new(HashMap::new()),
            challenges: ChallengeStore::new(),
            rng: Mutex::new(rng),
            trials_reconstructed: AtomicU64::new(0),
            bytes_ingested: AtomicU64::new(0),
            started: Instant::now(),
        }
    }

    pub fn config(&self) -> &AssemblyConfig {
        &self.config
    }

    pub fn storage(&self) -> &Arc<dyn StorageBackend> {
        &self.storage
    }

    /// Rebuilds the session registry from storage. Returns the number of
    /// sessions loaded.
    pub fn recover(&self) -> Result<usize, ExportError> {
        let mut loaded = 0;
        for key in self.storage.list("sessions/")? {
            if !key.ends_with("/session.json") {
                continue;
            }
            let bytes = self.storage.get(&key)?.unwrap_or_default();
            let meta: SessionMeta = serde_json::from_slice(&bytes)
                .map_err(|e| ExportError::Corrupt(format!("{key}: {e}")))?;
            let events = match self.storage.get(&events_key(&meta.session_id))? {
                Some(b) => {
                    parse_events_csv(&b).map_err(|e| ExportError::Corrupt(format!("{key}: {e}")))?
                }
                None => Vec::new(),
            };
            if let Some(b) = self.storage.get(&challenge_key(&meta.session_id))? {
                let ch: Challenge = serde_json::from_slice(&b).map_err(|e| {
                    ExportError::Corrupt(format!("challenge for {}: {e}", meta.session_id))
                })?;
                self.challenges.insert(ch);
            }
            self.trials_reconstructed
                .fetch_add(meta.reconstructed.len() as u64, Ordering::Relaxed);
            let id = meta.session_id.clone();
            let record = SessionRecord::from_meta(meta, events);
            self.sessions
                .write()
                .insert(id, Arc::new(Mutex::new(record)));
            loaded += 1;
        }
        Ok(loaded)
    }

    fn lookup(&self, session_id: &str) -> Option<Arc<Mutex<SessionRecord>>> {
        self.sessions.read().get(session_id).cloned()
    }

    fn get_or_create(
        &self,
        session_id: &str,
        now_ms: u64,
    ) -> Result<Arc<Mutex<SessionRecord>>, IngestError> {
        if let Some(s) = self.lookup(session_id) {
            return Ok(s);
        }
        if self.config.require_registration {
            return Err(IngestError::UnknownSession(session_id.to_string()));
        }
        let mut map = self.sessions.write();
        let entry = map
            .entry(session_id.to_string())
            .or_insert_with(|| Arc::new(Mutex::new(SessionRecord::new(session_id, now_ms))));
        Ok(entry.clone())
    }

    /// Creates the session with known participant and treatment. Returns
    /// `false` if it already existed (metadata is then filled only where
    /// unset).
    pub fn register_session(
        &self,
        session_id: &str,
        participant_id: &str,
        treatment: &str,
        now_ms: u64,
    ) -> Result<bool, StorageError> {
        let (rec, created) = {
            let mut map = self.sessions.write();
            match map.get(session_id) {
                Some(r) => (r.clone(), false),
                None => {
                    let r = Arc::new(Mutex::new(SessionRecord::new(session_id, now_ms)));
                    map.insert(session_id.to_string(), r.clone());
                    (r, true)
                }
            }
        };
        let mut r = rec.lock();
        if r.participant_id.is_empty() {
            r.participant_id = participant_id.to_string();
        }
        if r.treatment.is_empty() {
            r.treatment = treatment.to_string();
        }
        self.persist_meta(&r)?;
        Ok(created)
    }

    fn persist_meta(&self, r: &SessionRecord) -> Result<(), StorageError> {
        let bytes = serde_json::to_vec(&r.meta()).expect("meta serializes");
        self.storage.put(&meta_key(&r.session_id), &bytes)
    }

    pub fn ingest_envelope(&self, e: &WireEnvelope, now_ms: u64) -> Result<IngestAck, IngestError> {
        if !matches!(e.body, Body::Event(_)) && e.trial == 0 {
            return Err(IngestError::SessionScopedStream);
        }
        let rec = self.get_or_create(&e.session, now_ms)?;
        let mut r = rec.lock();
        match &e.body {
            Body::Event(ev) => {
                let duplicate = r
                    .events
                    .iter()
                    .any(|x| x.ts_ms == e.ts_ms && x.name == ev.name && x.data == ev.data);
                if duplicate {
                    return Ok(IngestAck {
                        accepted: true,
                        trial_status: None,
                    });
                }
                r.record_event(e.ts_ms, &ev.name, &ev.data, now_ms);
                self.storage
                    .put(&events_key(&r.session_id), &events_csv(&r))?;
                self.persist_meta(&r)?;
                Ok(IngestAck {
                    accepted: true,
                    trial_status: None,
                })
            }
            body => {
                let trial = e.trial;
                let outcome = r.trials.entry(trial).or_default().insert(body)?;
                self.bytes_ingested
                    .fetch_add(outcome.new_bytes as u64, Ordering::Relaxed);
                r.updated_ts_ms = now_ms;
                if outcome.ready {
                    self.finish_trial(&mut r, trial)?;
                }
                Ok(IngestAck {
                    accepted: true,
                    trial_status: Some(r.trials[&trial].status),
                })
            }
        }
    }

    /// Runs reconstruction on a ready buffer and persists the result. The
    /// buffer leaves `Open` only after storage accepted the write, so a
    /// failed write is retried by the next duplicate envelope.
    fn finish_trial(&self, r: &mut SessionRecord, trial: u32) -> Result<(), StorageError> {
        let result = try_reconstruct(&r.trials[&trial]).expect("ready buffers have a tail");
        match result {
            Reconstruction::Complete(payload) => {
                self.storage
                    .put(&trial_key(&r.session_id, trial, "raw"), &payload)?;
                match decode_trajectory(&payload) {
                    Ok(samples) => {
                        let csv = trial_csv(
                            &r.session_id,
                            &r.participant_id,
                            &r.treatment,
                            trial,
                            &samples,
                        );
                        self.storage
                            .put(&trial_key(&r.session_id, trial, "csv"), &csv)?;
                    }
                    Err(err) => {
                        tracing::warn!(session = %r.session_id, trial, %err, "reconstructed payload is not a trajectory; stored raw only");
                    }
                }
                let b = r.trials.get_mut(&trial).expect("buffer exists");
                b.status = TrialStatus::Reconstructed;
                b.chunks.clear();
                self.trials_reconstructed.fetch_add(1, Ordering::Relaxed);
                self.persist_meta(r)?;
            }
            Reconstruction::Mismatch(report) => {
                tracing::warn!(session = %r.session_id, trial, ?report, "trial checksum mismatch");
                r.trials.get_mut(&trial).expect("buffer exists").status =
                    TrialStatus::ChecksumMismatch;
            }
        }
        Ok(())
    }

    pub fn export_trial_csv(&self, session_id: &str, trial: u32) -> Result<Vec<u8>, ExportError> {
        if let Some(bytes) = self.storage.get(&trial_key(session_id, trial, "csv"))? {
            return Ok(bytes);
        }
        let rec = self
            .lookup(session_id)
            .ok_or_else(|| ExportError::UnknownSession(session_id.to_string()))?;
        let status = rec.lock().trials.get(&trial).map(|b| b.status);
        Err(ExportError::NotReady { trial, status })
    }

    pub fn export_events_csv(&self, session_id: &str) -> Result<Vec<u8>, ExportError> {
        let Some(rec) = self.lookup(session_id) else {
            return match self.storage.get(&events_key(session_id))? {
                Some(b) => Ok(b),
                None => Err(ExportError::UnknownSession(session_id.to_string())),
            };
        };
        let r = rec.lock();
        Ok(events_csv(&r))
    }

    pub fn service_status(&self) -> ServiceStatus {
        let sessions: Vec<_> = self.sessions.read().values().cloned().collect();
        let mut by_state: BTreeMap<SessionState, u64> =
            SessionState::ALL.iter().map(|s| (*s, 0)).collect();
        for s in &sessions {
            *by_state.entry(s.lock().state).or_default() += 1;
        }
        ServiceStatus {
            uptime_s: self.started.elapsed().as_secs(),
            sessions_total: sessions.len() as u64,
            sessions_by_state: by_state,
            trials_reconstructed: self.trials_reconstructed.load(Ordering::Relaxed),
            bytes_ingested: self.bytes_ingested.load(Ordering::Relaxed),
        }
    }

    pub fn uptime_s(&self) -> u64 {
        self.started.elapsed().as_secs()
    }

    /// Sorted by session id.
    pub fn sessions(&self) -> Vec<SessionSummary> {
        let sessions: Vec<_> = self.sessions.read().values().cloned().collect();
        let mut out: Vec<_> = sessions.iter().map(|s| s.lock().summary()).collect();
        out.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        out
    }

    pub fn session(&self, session_id: &str) -> Option<SessionSummary> {
        self.lookup(session_id).map(|r| r.lock().summary())
    }

    pub fn issue_challenge(&self, session_id: &str, now_ms: u64) -> Result<Challenge, ExportError> {
        if self.lookup(session_id).is_none() {
            return Err(ExportError::UnknownSession(session_id.to_string()));
        }
        let ch = {
            let mut rng = self.rng.lock();
            self.challenges.issue(session_id, &mut *rng, now_ms)
        };
        let bytes = serde_json::to_vec(&ch).expect("challenge serializes");
        self.storage.put(&challenge_key(session_id), &bytes)?;
        Ok(ch)
    }

    pub fn challenge(&self, session_id: &str) -> Option<Challenge> {
        self.challenges.get(session_id)
    }

    /// Client-side completion signal. A valid code moves an offboarding
    /// session to `Completed`.
    pub fn complete_session(
        &self,
        session_id: &str,
        code: &str,
        now_ms: u64,
    ) -> Result<bool, ExportError> {
        let rec = self
            .lookup(session_id)
            .ok_or_else(|| ExportError::UnknownSession(session_id.to_string()))?;
        let Some(ch) = self.challenges.get(session_id) else {
            return Ok(false);
        };
        if !verify_code(code, &ch, &self.config.salt) {
            return Ok(false);
        }
        let mut r = rec.lock();
        match r.state {
            SessionState::Offboarding => {
                r.state = SessionState::Completed;
                r.updated_ts_ms = now_ms;
                self.persist_meta(&r)?;
                Ok(true)
            }
            SessionState::Completed => Ok(true),
            _ => Ok(false),
        }
    }

    /// Marks sessions still onboarding or in trial and idle for at least the
    /// configured timeout as abandoned. Returns the affected ids.
    pub fn sweep_idle(&self, now_ms: u64) -> Result<Vec<String>, StorageError> {
        let sessions: Vec<_> = self.sessions.read().values().cloned().collect();
        let mut swept = Vec::new();
        for rec in sessions {
            let mut r = rec.lock();
            let idle = now_ms.saturating_sub(r.updated_ts_ms) >= self.config.idle_timeout_ms;
            if idle && matches!(r.state, SessionState::Onboarding | SessionState::InTrial) {
                r.state = SessionState::Abandoned;
                r.updated_ts_ms = now_ms;
                self.persist_meta(&r)?;
                swept.push(r.session_id.clone());
            }
        }
        swept.sort();
        Ok(swept)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::derive_code;
    use crate::protocol::{chunk_payload, encode_trajectory, StreamMeta};
    use serde_json::{Map, Value};

    fn service() -> (AssemblyService, Arc<MemoryStorage>) {
        let storage = Arc::new(MemoryStorage::new());
        let cfg = AssemblyConfig {
            salt: "pepper".into(),
            challenge_seed: Some(1),
            ..AssemblyConfig::default()
        };
        (AssemblyService::new(cfg, storage.clone()), storage)
    }

    fn event(session: &str, name: &str) -> WireEnvelope {
        let mut data = Map::new();
        data.insert("participant_id".into(), Value::from("p1"));
        data.insert("treatment".into(), Value::from("B"));
        WireEnvelope::event(session, 0, 5, name, data)
    }

    fn samples(n: usize) -> Vec<TrajectorySample> {
        (0..n)
            .map(|i| TrajectorySample {
                t: i as f64 * 0.02,
                x: i as f64 * 0.05,
                y: 0.0,
                z: 1.0,
                yaw: 90.0,
                pitch: 0.0,
            })
            .collect()
    }

    fn stream(session: &str, trial: u32, n: usize, chunk: usize) -> Vec<WireEnvelope> {
        let payload = encode_trajectory(&samples(n)).unwrap();
        let meta = StreamMeta {
            session: session.into(),
            trial,
            ts_ms: 9,
            sample_hz: 50.0,
        };
        chunk_payload(&payload, chunk, &meta).into_envelopes()
    }

    #[test]
    fn fresh_status_is_zero() {
        let (svc, _) = service();
        let st = svc.service_status();
        assert_eq!(st.sessions_total, 0);
        assert_eq!(st.trials_reconstructed, 0);
        assert_eq!(st.bytes_ingested, 0);
        assert!(st.sessions_by_state.values().all(|v| *v == 0));
    }

    #[test]
    fn all_arrival_orders_reconstruct() {
        let base = stream("s", 1, 40, 900);
        let chunks: Vec<_> = base[1..base.len() - 1].to_vec();
        assert_eq!(chunks.len(), 3);
        for perm in [
            [0, 1, 2],
            [0, 2, 1],
            [1, 0, 2],
            [1, 2, 0],
            [2, 0, 1],
            [2, 1, 0],
        ] {
            let (svc, storage) = service();
            for i in perm {
                svc.ingest_envelope(&chunks[i], 1).unwrap();
            }
            let ack = svc.ingest_envelope(base.last().unwrap(), 2).unwrap();
            assert_eq!(ack.trial_status, Some(TrialStatus::Reconstructed));
            assert_eq!(storage.put_count(&trial_key("s", 1, "csv")), 1);
        }
    }

    #[test]
    fn checksum_mismatch_persists_nothing() {
        let (svc, storage) = service();
        let mut env = stream("s", 1, 40, 900);
        if let Body::Chunk { bytes, .. } = &mut env[1].body {
            let mut v = bytes.to_vec();
            v[3] ^= 0x40;
            *bytes = v.into();
        }
        let mut last = None;
        for e in &env {
            last = Some(svc.ingest_envelope(e, 1).unwrap());
        }
        assert_eq!(
            last.unwrap().trial_status,
            Some(TrialStatus::ChecksumMismatch)
        );
        assert_eq!(storage.get(&trial_key("s", 1, "raw")).unwrap(), None);
        assert!(matches!(
            svc.export_trial_csv("s", 1),
            Err(ExportError::NotReady {
                status: Some(TrialStatus::ChecksumMismatch),
                ..
            })
        ));
    }

    #[test]
    fn duplicate_chunk_is_accepted_and_harmless() {
        let (svc, _) = service();
        let env = stream("s", 1, 40, 900);
        let a = svc.ingest_envelope(&env[1], 1).unwrap();
        let bytes = svc.service_status().bytes_ingested;
        let b = svc.ingest_envelope(&env[1], 1).unwrap();
        assert!(a.accepted && b.accepted);
        assert_eq!(svc.service_status().bytes_ingested, bytes);
    }

    #[test]
    fn duplicate_event_is_recorded_once() {
        let (svc, _) = service();
        svc.ingest_envelope(&event("s", "consent_given"), 1)
            .unwrap();
        svc.ingest_envelope(&event("s", "consent_given"), 2)
            .unwrap();
        let csv = svc.export_events_csv("s").unwrap();
        assert_eq!(
            csv.split(|b| *b == b'\n').filter(|l| !l.is_empty()).count(),
            2
        );
    }

    #[test]
    fn conflicting_duplicate_is_rejected() {
        let (svc, _) = service();
        let env = stream("s", 1, 40, 900);
        svc.ingest_envelope(&env[1], 1).unwrap();
        let mut evil = env[1].clone();
        if let Body::Chunk { bytes, .. } = &mut evil.body {
            let mut v = bytes.to_vec();
            v[0] ^= 1;
            *bytes = v.into();
        }
        assert!(matches!(
            svc.ingest_envelope(&evil, 1),
            Err(IngestError::Conflict(_))
        ));
    }

    #[test]
    fn registration_enforcement() {
        let storage = Arc::new(MemoryStorage::new());
        let cfg = AssemblyConfig {
            require_registration: true,
            ..AssemblyConfig::default()
        };
        let svc = AssemblyService::new(cfg, storage);
        assert!(matches!(
            svc.ingest_envelope(&event("s", "consent_given"), 1),
            Err(IngestError::UnknownSession(_))
        ));
        svc.register_session("s", "p1", "A", 1).unwrap();
        svc.ingest_envelope(&event("s", "consent_given"), 1)
            .unwrap();
    }

    #[test]
    fn trial_csv_export() {
        let (svc, _) = service();
        svc.ingest_envelope(&event("s", "consent_given"), 1)
            .unwrap();
        for e in stream("s", 1, 2, 4300) {
            svc.ingest_envelope(&e, 1).unwrap();
        }
        let csv = String::from_utf8(svc.export_trial_csv("s", 1).unwrap()).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], TRIAL_CSV_HEADER.join(","));
        assert_eq!(
            lines[2],
            "s,p1,B,1,0.020000,0.050000,0.000000,1.000000,90.000000,0.000000"
        );
    }

    #[test]
    fn events_csv_export() {
        let (svc, _) = service();
        assert!(matches!(
            svc.export_events_csv("nope"),
            Err(ExportError::UnknownSession(_))
        ));
        svc.ingest_envelope(&event("s", "consent_given"), 1)
            .unwrap();
        let csv = String::from_utf8(svc.export_events_csv("s").unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("session_id,ts_ms,name,data_json\n"));
    }

    #[test]
    fn session_lifecycle_and_completion() {
        let (svc, _) = service();
        for name in [
            "onboarding_pass",
            "consent_given",
            "trial_start",
            "trial_end",
            "session_complete",
        ] {
            svc.ingest_envelope(&event("s", name), 10).unwrap();
        }
        assert_eq!(svc.session("s").unwrap().state, SessionState::Offboarding);
        assert!(!svc.complete_session("s", "AAAAAAAAAAAA", 11).unwrap());
        let ch = svc.issue_challenge("s", 11).unwrap();
        let code = derive_code(&ch, "pepper").unwrap();
        assert!(svc.complete_session("s", code.as_str(), 12).unwrap());
        assert_eq!(svc.session("s").unwrap().state, SessionState::Completed);
        let st = svc.service_status();
        assert_eq!(st.sessions_by_state[&SessionState::Completed], 1);
        assert_eq!(
            st.sessions_by_state.values().sum::<u64>(),
            st.sessions_total
        );
    }

    #[test]
    fn idle_sessions_are_abandoned() {
        let (svc, _) = service();
        svc.ingest_envelope(&event("idle", "trial_start"), 0)
            .unwrap();
        svc.ingest_envelope(&event("busy", "trial_start"), 50 * 60 * 1000)
            .unwrap();
        let swept = svc.sweep_idle(60 * 60 * 1000).unwrap();
        assert_eq!(swept, vec!["idle"]);
        assert_eq!(svc.session("idle").unwrap().state, SessionState::Abandoned);
        assert_eq!(svc.session("busy").unwrap().state, SessionState::InTrial);
    }

    #[test]
    fn restart_recovers_from_storage() {
        let (svc, storage) = service();
        svc.ingest_envelope(&event("s", "onboarding_pass"), 1)
            .unwrap();
        for e in stream("s", 1, 30, 500) {
            svc.ingest_envelope(&e, 1).unwrap();
        }
        let before_csv = svc.export_trial_csv("s", 1).unwrap();
        let before_events = svc.export_events_csv("s").unwrap();
        drop(svc);
        let restarted = AssemblyService::new(AssemblyConfig::default(), storage);
        assert_eq!(restarted.recover().unwrap(), 1);
        assert_eq!(restarted.export_trial_csv("s", 1).unwrap(), before_csv);
        assert_eq!(restarted.export_events_csv("s").unwrap(), before_events);
        let summary = restarted.session("s").unwrap();
        assert!(restarted.challenge("s").is_none());
        assert_eq!(summary.capable, Some(true));
        assert_eq!(summary.trials[&1], TrialStatus::Reconstructed);
    }

    #[test]
    fn stream_on_trial_zero_rejected() {
        let (svc, _) = service();
        let env = stream("s", 0, 3, 4300);
        assert!(matches!(
            svc.ingest_envelope(&env[0], 0),
            Err(IngestError::SessionScopedStream)
        ));
    }
}
