use std::collections::{BTreeMap, BTreeSet};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitSpec {
    pub title: String,
    pub reward_usd: f64,
    pub max_assignments: u32,
    pub external_url: String,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("recruitment client: {0}")]
pub struct ClientError(pub String);

/// The crowdsourcing platform as seen by the researcher.
pub trait RecruitmentClient: Send + Sync {
    fn create_hit(&self, spec: &HitSpec, batch: u32) -> Result<String, ClientError>;
    fn approve(&self, session_id: &str) -> Result<(), ClientError>;
    fn pay(&self, session_id: &str, amount_usd: f64) -> Result<(), ClientError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum RecruitmentCall {
    CreateHit { batch: u32, hit_id: String },
    Approve { session_id: String },
    Pay { session_id: String, amount_usd: f64 },
}

/// In-process recruitment client that records every successful call and
/// can be told to fail specific operations.
#[derive(Debug, Default)]
pub struct MockRecruitmentClient {
    calls: Mutex<Vec<RecruitmentCall>>,
    failing_batches: Mutex<BTreeSet<u32>>,
    failing_pay: Mutex<BTreeSet<String>>,
    next_hit: Mutex<u64>,
}

impl MockRecruitmentClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fail_batch(&self, batch: u32, fail: bool) {
        let mut set = self.failing_batches.lock();
        if fail {
            set.insert(batch);
        } else {
            set.remove(&batch);
        }
    }

    pub fn fail_pay(&self, session_id: &str, fail: bool) {
        let mut set = self.failing_pay.lock();
        if fail {
            set.insert(session_id.to_string());
        } else {
            set.remove(session_id);
        }
    }

    pub fn calls(&self) -> Vec<RecruitmentCall> {
        self.calls.lock().clone()
    }

    pub fn pay_calls(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for c in self.calls.lock().iter() {
            if let RecruitmentCall::Pay {
                session_id,
                amount_usd,
            } = c
            {
                out.entry(session_id.clone()).or_default().push(*amount_usd);
            }
        }
        out
    }

    pub fn create_calls(&self) -> usize {
        self.calls
            .lock()
            .iter()
            .filter(|c| matches!(c, RecruitmentCall::CreateHit { .. }))
            .count()
    }
}

impl RecruitmentClient for MockRecruitmentClient {
    fn create_hit(&self, _spec: &HitSpec, batch: u32) -> Result<String, ClientError> {
        if self.failing_batches.lock().contains(&batch) {
            return Err(ClientError(format!(
                "injected failure creating batch {batch}"
            )));
        }
        let id = {
            let mut n = self.next_hit.lock();
            *n += 1;
            format!("HIT{:06}", *n)
        };
        self.calls.lock().push(RecruitmentCall::CreateHit {
            batch,
            hit_id: id.clone(),
        });
        Ok(id)
    }

    fn approve(&self, session_id: &str) -> Result<(), ClientError> {
        self.calls.lock().push(RecruitmentCall::Approve {
            session_id: session_id.to_string(),
        });
        Ok(())
    }

    fn pay(&self, session_id: &str, amount_usd: f64) -> Result<(), ClientError> {
        if self.failing_pay.lock().contains(session_id) {
            return Err(ClientError(format!("injected failure paying {session_id}")));
        }
        self.calls.lock().push(RecruitmentCall::Pay {
            session_id: session_id.to_string(),
            amount_usd,
        });
        Ok(())
    }
}

/// HIT ids by 1-based batch index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitBook {
    pub ids: BTreeMap<u32, String>,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("creating HIT batch {batch}: {source}")]
pub struct HitError {
    pub batch: u32,
    #[source]
    pub source: ClientError,
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
#[error("max_assignments must be at least 1")]
pub struct InvalidHitSpec;

/// Creates batches `1..=batches`, skipping any already in `book`. Stops at
/// the first failure; earlier ids stay recorded so a rerun resumes there.
pub fn create_hits(
    spec: &HitSpec,
    batches: u32,
    client: &dyn RecruitmentClient,
    book: &mut HitBook,
) -> Result<Vec<String>, HitError> {
    if spec.max_assignments < 1 {
        return Err(HitError {
            batch: 0,
            source: ClientError(InvalidHitSpec.to_string()),
        });
    }
    for batch in 1..=batches {
        if book.ids.contains_key(&batch) {
            continue;
        }
        let id = client
            .create_hit(spec, batch)
            .map_err(|source| HitError { batch, source })?;
        book.ids.insert(batch, id);
    }
    Ok((1..=batches).map(|b| book.ids[&b].clone()).collect())
}
