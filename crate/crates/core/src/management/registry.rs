use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignmentStrategy {
    Balanced,
    UniformRandom,
}

impl std::str::FromStr for AssignmentStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "uniform_random" => Ok(Self::UniformRandom),
            other => Err(format!("unknown assignment strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardDecision {
    pub base_usd: f64,
    pub bonus_usd: f64,
    pub total_usd: f64,
    pub duration_min: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRecord {
    pub participant_id: String,
    pub session_id: String,
    pub treatment: String,
    pub assignment_ts_ms: u64,
    pub verified: bool,
    pub reward: Option<RewardDecision>,
}

/// One line of `registry.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum JournalRecord {
    Assign {
        ts_ms: u64,
        participant_id: String,
        session_id: String,
        treatment: String,
    },
    Verify {
        ts_ms: u64,
        session_id: String,
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reason: Option<String>,
    },
    Reward {
        ts_ms: u64,
        session_id: String,
        decision: RewardDecision,
    },
    Alarm {
        ts_ms: u64,
        target: String,
        consecutive_failures: u32,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("participant {0} is already assigned")]
    DuplicateParticipant(String),
    #[error("session {0} is already assigned to another participant")]
    DuplicateSession(String),
    #[error("no treatments configured")]
    NoTreatments,
    #[error("journal {path}: {msg}")]
    Journal { path: PathBuf, msg: String },
}

#[derive(Debug, Default)]
struct Inner {
    participants: BTreeMap<String, ParticipantRecord>,
    by_session: HashMap<String, String>,
    /// Verification and reward outcomes keyed by session, also for sessions
    /// that never went through assignment.
    verified: HashMap<String, bool>,
    rewards: HashMap<String, RewardDecision>,
    counts: Vec<u64>,
    assigned: u64,
    alarms: Vec<JournalRecord>,
    journal: Option<(PathBuf, File)>,
}

impl Inner {
    fn apply(&mut self, rec: &JournalRecord, treatments: &[String]) {
        match rec {
            JournalRecord::Assign {
                ts_ms,
                participant_id,
                session_id,
                treatment,
            } => {
                if let Some(i) = treatments.iter().position(|t| t == treatment) {
                    self.counts[i] += 1;
                }
                self.assigned += 1;
                self.by_session
                    .insert(session_id.clone(), participant_id.clone());
                self.participants.insert(
                    participant_id.clone(),
                    ParticipantRecord {
                        participant_id: participant_id.clone(),
                        session_id: session_id.clone(),
                        treatment: treatment.clone(),
                        assignment_ts_ms: *ts_ms,
                        verified: false,
                        reward: None,
                    },
                );
            }
            JournalRecord::Verify { session_id, ok, .. } => {
                if *ok {
                    self.verified.insert(session_id.clone(), true);
                    if let Some(p) = self.record_for_session(session_id) {
                        p.verified = true;
                    }
                }
            }
            JournalRecord::Reward {
                session_id,
                decision,
                ..
            } => {
                self.rewards.insert(session_id.clone(), decision.clone());
                if let Some(p) = self.record_for_session(session_id) {
                    p.reward = Some(decision.clone());
                }
            }
            JournalRecord::Alarm { .. } => self.alarms.push(rec.clone()),
        }
    }

    fn record_for_session(&mut self, session_id: &str) -> Option<&mut ParticipantRecord> {
        let pid = self.by_session.get(session_id)?;
        self.participants.get_mut(pid)
    }

    fn append(&mut self, rec: &JournalRecord) -> Result<(), RegistryError> {
        if let Some((path, file)) = &mut self.journal {
            let mut line = serde_json::to_vec(rec).expect("record serializes");
            line.push(b'\n');
            file.write_all(&line)
                .and_then(|_| file.flush())
                .map_err(|e| RegistryError::Journal {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
        }
        Ok(())
    }
}

/// Participant registry. All mutations go through one mutex and are
/// journaled before they take effect in memory.
#[derive(Debug)]
pub struct Registry {
    treatments: Vec<String>,
    strategy: AssignmentStrategy,
    seed: u64,
    inner: Mutex<Inner>,
}

impl Registry {
    pub fn in_memory(treatments: Vec<String>, strategy: AssignmentStrategy, seed: u64) -> Self {
        let inner = Inner {
            counts: vec![0; treatments.len()],
            ..Inner::default()
        };
        Self {
            treatments,
            strategy,
            seed,
            inner: Mutex::new(inner),
        }
    }

    /// Opens (or creates) a journal and replays it. A torn final line, as
    /// left by a crash mid-write, is dropped; any other unparsable line is
    /// an error.
    pub fn open(
        path: &Path,
        treatments: Vec<String>,
        strategy: AssignmentStrategy,
        seed: u64,
    ) -> Result<Self, RegistryError> {
        let err = |msg: String| RegistryError::Journal {
            path: path.to_path_buf(),
            msg,
        };
        let reg = Self::in_memory(treatments, strategy, seed);
        let mut valid_len = 0u64;
        if path.exists() {
            let file = File::open(path).map_err(|e| err(e.to_string()))?;
            let mut reader = BufReader::new(file);
            let mut line = String::new();
            let mut lineno = 0;
            let mut inner = reg.inner.lock();
            loop {
                line.clear();
                let n = reader
                    .read_line(&mut line)
                    .map_err(|e| err(e.to_string()))?;
                if n == 0 {
                    break;
                }
                lineno += 1;
                let complete = line.ends_with('\n');
                match serde_json::from_str::<JournalRecord>(line.trim_end()) {
                    Ok(rec) if complete => {
                        inner.apply(&rec, &reg.treatments);
                        valid_len += n as u64;
                    }
                    _ if !complete => {
                        tracing::warn!(path = %path.display(), lineno, "dropping torn journal line");
                        break;
                    }
                    Err(e) => return Err(err(format!("line {lineno}: {e}"))),
                    Ok(_) => unreachable!(),
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| err(e.to_string()))?;
        file.set_len(valid_len).map_err(|e| err(e.to_string()))?;
        reg.inner.lock().journal = Some((path.to_path_buf(), file));
        Ok(reg)
    }

    pub fn treatments(&self) -> &[String] {
        &self.treatments
    }

    pub fn strategy(&self) -> AssignmentStrategy {
        self.strategy
    }

    /// Picks and records a treatment. The n-th assignment draws from a
    /// ChaCha stream selected by n, so the sequence depends only on the seed
    /// and arrival order.
    pub fn assign(
        &self,
        participant_id: &str,
        session_id: &str,
        now_ms: u64,
    ) -> Result<ParticipantRecord, RegistryError> {
        if self.treatments.is_empty() {
            return Err(RegistryError::NoTreatments);
        }
        let mut inner = self.inner.lock();
        if inner.participants.contains_key(participant_id) {
            return Err(RegistryError::DuplicateParticipant(
                participant_id.to_string(),
            ));
        }
        if inner.by_session.contains_key(session_id) {
            return Err(RegistryError::DuplicateSession(session_id.to_string()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(inner.assigned);
        let idx = match self.strategy {
            AssignmentStrategy::UniformRandom => rng.random_range(0..self.treatments.len()),
            AssignmentStrategy::Balanced => {
                let min = *inner.counts.iter().min().expect("non-empty");
                let candidates: Vec<usize> = (0..inner.counts.len())
                    .filter(|i| inner.counts[*i] == min)
                    .collect();
                candidates[rng.random_range(0..candidates.len())]
            }
        };
        let rec = JournalRecord::Assign {
            ts_ms: now_ms,
            participant_id: participant_id.to_string(),
            session_id: session_id.to_string(),
            treatment: self.treatments[idx].clone(),
        };
        inner.append(&rec)?;
        inner.apply(&rec, &self.treatments);
        Ok(inner.participants[participant_id].clone())
    }

    pub(crate) fn record(&self, rec: JournalRecord) -> Result<(), RegistryError> {
        let mut inner = self.inner.lock();
        inner.append(&rec)?;
        inner.apply(&rec, &self.treatments);
        Ok(())
    }

    pub fn participant(&self, participant_id: &str) -> Option<ParticipantRecord> {
        self.inner.lock().participants.get(participant_id).cloned()
    }

    pub fn participant_for_session(&self, session_id: &str) -> Option<ParticipantRecord> {
        let inner = self.inner.lock();
        let pid = inner.by_session.get(session_id)?;
        inner.participants.get(pid).cloned()
    }

    /// Sorted by participant id.
    pub fn participants(&self) -> Vec<ParticipantRecord> {
        self.inner.lock().participants.values().cloned().collect()
    }

    pub fn reward_for(&self, session_id: &str) -> Option<RewardDecision> {
        self.inner.lock().rewards.get(session_id).cloned()
    }

    pub fn is_verified(&self, session_id: &str) -> bool {
        self.inner.lock().verified.contains_key(session_id)
    }

    /// Sessions with a reward, sorted by id.
    pub fn rewarded_sessions(&self) -> Vec<(String, RewardDecision)> {
        let inner = self.inner.lock();
        let mut v: Vec<_> = inner
            .rewards
            .iter()
            .map(|(k, d)| (k.clone(), d.clone()))
            .collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    /// Group sizes in treatment order.
    pub fn counts(&self) -> Vec<u64> {
        self.inner.lock().counts.clone()
    }

    pub fn alarms(&self) -> Vec<JournalRecord> {
        self.inner.lock().alarms.clone()
    }
}
