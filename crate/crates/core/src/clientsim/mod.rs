//! Simulated participants.
//!
//! Each simulated browser runs the onboarding capability check, gives
//! consent, walks to six destinations in a grid building and streams every
//! trajectory to the assembly service in chunks, then fetches a challenge
//! and submits its completion code. Treatments change how strongly the
//! walker follows the shortest path, which gives the analysis a known
//! ground truth.

pub mod grid;
pub mod profile;
pub mod synthetic;
pub mod walk;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use futures::StreamExt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use grid::{Grid, GridError, DEFAULT_FLOOR_PLAN};
pub use profile::{onboarding_check, sample_profile, CapabilityProfile, OnboardingFailure};
pub use synthetic::synthetic_metrics;
pub use walk::{path_length, sample_path, simulate_trajectory, walk_path};

use crate::api::{ApiClient, ApiError};
use crate::assembly::TrialStatus;
use crate::completion::derive_code;
use crate::management::ParticipantRecord;
use crate::manifest::ExperimentManifest;
use crate::protocol::{chunk_payload, encode_trajectory, StreamMeta, WireEnvelope};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff_base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            backoff_base: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimAgentConfig {
    pub seed: u64,
    pub grid: Grid,
    /// Shortest-path probability for treatments missing from `treatment_bias`.
    pub bias: f64,
    pub treatment_bias: BTreeMap<String, f64>,
    /// Per-participant spread of the shortest-path probability.
    pub participant_bias_sd: f64,
    pub sample_period_ms: u32,
    /// Cells per second.
    pub speed: f64,
    pub capability_pass_p: f64,
    pub completion_p: f64,
    pub retry: RetryPolicy,
    /// Share of posts whose first attempt fails in transit.
    pub fault_rate: f64,
    /// Where to keep the client-side trajectory payloads.
    pub record_dir: Option<PathBuf>,
}

impl Default for SimAgentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: Grid::default_building(),
            bias: 0.70,
            treatment_bias: [("Control", 0.70), ("A", 0.70), ("B", 0.85)]
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            participant_bias_sd: 0.03,
            sample_period_ms: 20,
            speed: 2.5,
            capability_pass_p: 0.68,
            completion_p: 0.47,
            retry: RetryPolicy::default(),
            fault_rate: 0.0,
            record_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid simulation config: {0}")]
pub struct ConfigError(pub String);

impl SimAgentConfig {
    pub fn with_manifest(m: &ExperimentManifest) -> Self {
        Self {
            sample_period_ms: m.sample_period_ms,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let probs = [
            ("bias", self.bias),
            ("capability_pass_p", self.capability_pass_p),
            ("completion_p", self.completion_p),
            ("fault_rate", self.fault_rate),
        ];
        for (name, p) in probs.into_iter().chain(
            self.treatment_bias
                .iter()
                .map(|(_, v)| ("treatment_bias", *v)),
        ) {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError(format!("{name} = {p} is not a probability")));
            }
        }
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(ConfigError(format!(
                "speed must be positive, got {}",
                self.speed
            )));
        }
        if self.sample_period_ms == 0 {
            return Err(ConfigError("sample_period_ms must be positive".into()));
        }
        if !(self.participant_bias_sd >= 0.0) {
            return Err(ConfigError(
                "participant_bias_sd must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn treatment_bias(&self, treatment: &str) -> f64 {
        self.treatment_bias
            .get(treatment)
            .copied()
            .unwrap_or(self.bias)
    }
}

/// Per-participant random draws, made up front in a fixed order so the
/// outcome of a participant does not depend on scheduling.
#[derive(Debug, Clone)]
pub struct ParticipantPlan {
    pub profile: CapabilityProfile,
    pub bias: f64,
    /// Trials attempted before dropping out; `None` completes everything.
    pub dropout_after: Option<u32>,
    pub trajectories: Vec<Vec<crate::protocol::TrajectorySample>>,
}

pub fn participant_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn fault_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_FA17_0000_0000);
    rng.set_stream(index);
    rng
}

pub fn plan_participant<R: Rng + ?Sized>(
    cfg: &SimAgentConfig,
    treatment: &str,
    trials: u32,
    rng: &mut R,
) -> ParticipantPlan {
    let profile = sample_profile(cfg.capability_pass_p, rng);
    let noise = Normal::new(0.0, cfg.participant_bias_sd.max(0.0)).expect("finite sd");
    let bias = (cfg.treatment_bias(treatment) + noise.sample(rng)).clamp(0.0, 1.0);
    let completes = rng.random_bool(cfg.completion_p);
    let dropout_after = (!completes).then(|| rng.random_range(0..trials.max(1)));
    let trajectories = (1..=trials)
        .map(|k| {
            let target = (k as usize - 1) % grid::TARGETS + 1;
            simulate_trajectory(
                &cfg.grid,
                target,
                bias,
                cfg.speed,
                cfg.sample_period_ms,
                rng,
            )
        })
        .collect();
    ParticipantPlan {
        profile,
        bias,
        dropout_after,
        trajectories,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub index: u64,
    pub session_id: String,
    pub participant_id: String,
    pub treatment: String,
    pub os: String,
    pub browser: String,
    pub passed_onboarding: bool,
    pub completed: bool,
    pub trial_samples: Vec<usize>,
    pub wall_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
    pub envelopes: u64,
    pub retries: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    None,
    /// The request never reaches the service.
    Request,
    /// The service processes the request but the response is lost.
    Response,
}

struct Poster<'a> {
    api: &'a ApiClient,
    retry: RetryPolicy,
    fault_rate: f64,
    faults: ChaCha8Rng,
    envelopes: u64,
    retries: u64,
    latencies_ms: Vec<f64>,
}

impl Poster<'_> {
    fn draw_fault(&mut self) -> Fault {
        if self.fault_rate > 0.0 && self.faults.random_bool(self.fault_rate) {
            if self.faults.random_bool(0.5) {
                Fault::Request
            } else {
                Fault::Response
            }
        } else {
            Fault::None
        }
    }

    /// At-least-once delivery: the first attempt may be hit by an injected
    /// fault; transient failures are retried with exponential backoff.
    async fn call<T, F, Fut>(&mut self, mut f: F) -> Result<T, ApiError>
    where
        F: FnMut() -> Fut,
        Fut: std::future::Future<Output = Result<T, ApiError>>,
    {
        let fault = self.draw_fault();
        let mut attempt = 0;
        loop {
            let started = Instant::now();
            let result = match (attempt, fault) {
                (0, Fault::Request) => Err(ApiError::Transport("injected: request lost".into())),
                (0, Fault::Response) => {
                    let _ = f().await;
                    Err(ApiError::Transport("injected: response lost".into()))
                }
                _ => f().await,
            };
            match result {
                Ok(v) => {
                    self.latencies_ms
                        .push(started.elapsed().as_secs_f64() * 1000.0);
                    return Ok(v);
                }
                Err(e) if e.is_transient() && attempt < self.retry.retries => {
                    let backoff = self.retry.backoff_base * 2u32.pow(attempt);
                    tokio::time::sleep(backoff).await;
                    attempt += 1;
                    self.retries += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    async fn envelope(&mut self, e: &WireEnvelope) -> Result<Option<TrialStatus>, ApiError> {
        self.envelopes += 1;
        let api = self.api;
        let ack = self.call(|| api.post_envelope(e)).await?;
        Ok(ack.trial_status)
    }

    fn take_latencies(&mut self) -> Vec<f64> {
        std::mem::take(&mut self.latencies_ms)
    }
}

fn now_ms() -> u64 {
    crate::server::now_ms()
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

pub struct SessionRun {
    pub outcome: SessionOutcome,
    /// Round-trip milliseconds of every successful post.
    pub latencies_ms: Vec<f64>,
}

/// Runs one participant against the service. Transport errors that survive
/// the retry policy end the session and are reported in `outcome.error`.
pub async fn run_session(
    api: &ApiClient,
    cfg: &SimAgentConfig,
    manifest: &ExperimentManifest,
    assignment: &ParticipantRecord,
    index: u64,
) -> SessionRun {
    let started = Instant::now();
    let mut rng = participant_rng(cfg.seed, index);
    let plan = plan_participant(
        cfg,
        &assignment.treatment,
        manifest.trials_per_participant,
        &mut rng,
    );
    let mut poster = Poster {
        api,
        retry: cfg.retry,
        fault_rate: cfg.fault_rate,
        faults: fault_rng(cfg.seed, index),
        envelopes: 0,
        retries: 0,
        latencies_ms: Vec::new(),
    };
    let mut outcome = SessionOutcome {
        index,
        session_id: assignment.session_id.clone(),
        participant_id: assignment.participant_id.clone(),
        treatment: assignment.treatment.clone(),
        os: plan.profile.os.clone(),
        browser: plan.profile.browser.clone(),
        passed_onboarding: false,
        completed: false,
        trial_samples: Vec::new(),
        wall_ms: 0,
        code: None,
        envelopes: 0,
        retries: 0,
        error: None,
    };
    let result = drive(&mut poster, cfg, manifest, &plan, &mut outcome).await;
    if let Err(e) = result {
        outcome.error = Some(e);
    }
    outcome.envelopes = poster.envelopes;
    outcome.retries = poster.retries;
    outcome.wall_ms = started.elapsed().as_millis() as u64;
    SessionRun {
        outcome,
        latencies_ms: poster.take_latencies(),
    }
}

async fn drive(
    poster: &mut Poster<'_>,
    cfg: &SimAgentConfig,
    manifest: &ExperimentManifest,
    plan: &ParticipantPlan,
    out: &mut SessionOutcome,
) -> Result<(), String> {
    let sid = out.session_id.clone();
    let event = |name: &str, data: Value| WireEnvelope::event(&sid, 0, now_ms(), name, obj(data));
    let err = |what: &str, e: ApiError| format!("{what}: {e}");

    let check = onboarding_check(&plan.profile);
    let mut data = json!({
        "participant_id": out.participant_id,
        "treatment": out.treatment,
        "os": plan.profile.os,
        "browser": plan.profile.browser,
        "webgl_capable": plan.profile.webgl_capable,
        "frame_rate_ok": plan.profile.frame_rate_ok,
    });
    let name = match check {
        Ok(()) => "onboarding_pass",
        Err(reason) => {
            data["reason"] = Value::from(reason.as_str());
            "onboarding_fail"
        }
    };
    poster
        .envelope(&event(name, data))
        .await
        .map_err(|e| err("onboarding", e))?;
    if check.is_err() {
        return Ok(());
    }
    out.passed_onboarding = true;
    poster
        .envelope(&event("consent_given", json!({})))
        .await
        .map_err(|e| err("consent", e))?;

    for (i, samples) in plan.trajectories.iter().enumerate() {
        let trial = i as u32 + 1;
        if plan.dropout_after == Some(i as u32) {
            return Ok(());
        }
        let target = (i % grid::TARGETS) + 1;
        poster
            .envelope(&event(
                "trial_start",
                json!({ "trial": trial, "target": target }),
            ))
            .await
            .map_err(|e| err("trial_start", e))?;
        let payload = encode_trajectory(samples).map_err(|e| e.to_string())?;
        if let Some(dir) = &cfg.record_dir {
            let d = dir.join(&sid);
            std::fs::create_dir_all(&d)
                .and_then(|_| std::fs::write(d.join(format!("trial_{trial}.txt")), &payload))
                .map_err(|e| format!("recording client payload: {e}"))?;
        }
        let meta = StreamMeta {
            session: sid.clone(),
            trial,
            ts_ms: now_ms(),
            sample_hz: 1000.0 / cfg.sample_period_ms as f64,
        };
        let mut status = None;
        for e in chunk_payload(&payload, manifest.chunk_size_bytes, &meta).into_envelopes() {
            status = poster
                .envelope(&e)
                .await
                .map_err(|e| err(&format!("trial {trial} stream"), e))?;
        }
        if status != Some(TrialStatus::Reconstructed) {
            return Err(format!("trial {trial} ended with status {status:?}"));
        }
        out.trial_samples.push(samples.len());
        poster
            .envelope(&event(
                "trial_end",
                json!({ "trial": trial, "samples": samples.len() }),
            ))
            .await
            .map_err(|e| err("trial_end", e))?;
    }
    poster
        .envelope(&event("session_complete", json!({})))
        .await
        .map_err(|e| err("session_complete", e))?;

    let api = poster.api;
    let ch = poster
        .call(|| api.challenge(&sid))
        .await
        .map_err(|e| err("challenge", e))?;
    let code = derive_code(&ch, &manifest.salt).map_err(|e| e.to_string())?;
    let verified = poster
        .call(|| api.complete(&sid, code.as_str()))
        .await
        .map_err(|e| err("complete", e))?;
    out.code = Some(code.as_str().to_string());
    out.completed = verified;
    if !verified {
        return Err("service rejected the completion code".into());
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub participants: u64,
    pub passed_onboarding: u64,
    pub completed: u64,
    pub errors: u64,
    pub envelopes: u64,
    pub retries: u64,
    pub wall_s: f64,
    pub envelopes_per_s: f64,
    pub p95_ingest_ms: f64,
}

#[derive(Debug, Clone)]
pub struct CohortResult {
    /// In participant index order.
    pub outcomes: Vec<SessionOutcome>,
    pub report: CohortReport,
}

#[derive(Debug, thiserror::Error)]
pub enum CohortError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cohort needs at least one participant")]
    Empty,
    #[error("assigning {participant}: {source}")]
    Assign {
        participant: String,
        #[source]
        source: ApiError,
    },
}

pub fn participant_id(seed: u64, index: u64) -> String {
    format!("p{seed}-{index:04}")
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Assigns `n` participants in index order, then runs their sessions with
/// at most `parallelism` in flight.
pub async fn run_cohort(
    api: &ApiClient,
    cfg: &SimAgentConfig,
    manifest: &ExperimentManifest,
    n: u64,
    first_index: u64,
    parallelism: usize,
) -> Result<CohortResult, CohortError> {
    cfg.validate()?;
    if n == 0 {
        return Err(CohortError::Empty);
    }
    let started = Instant::now();
    let mut assignments = Vec::with_capacity(n as usize);
    let mut poster = Poster {
        api,
        retry: cfg.retry,
        fault_rate: 0.0,
        faults: fault_rng(cfg.seed, u64::MAX),
        envelopes: 0,
        retries: 0,
        latencies_ms: Vec::new(),
    };
    for index in first_index..first_index + n {
        let pid = participant_id(cfg.seed, index);
        let rec = assign_idempotent(&mut poster, &pid)
            .await
            .map_err(|source| CohortError::Assign {
                participant: pid.clone(),
                source,
            })?;
        assignments.push((index, rec));
    }

    let runs: Vec<SessionRun> = futures::stream::iter(assignments.iter())
        .map(|(index, rec)| run_session(api, cfg, manifest, rec, *index))
        .buffer_unordered(parallelism.max(1))
        .collect()
        .await;
    let wall_s = started.elapsed().as_secs_f64();
    let mut latencies: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.latencies_ms.iter().copied())
        .collect();
    latencies.sort_by(|a, b| a.total_cmp(b));
    let mut outcomes: Vec<SessionOutcome> = runs.into_iter().map(|r| r.outcome).collect();
    outcomes.sort_by_key(|o| o.index);
    let envelopes: u64 = outcomes.iter().map(|o| o.envelopes).sum();
    let report = CohortReport {
        participants: n,
        passed_onboarding: outcomes.iter().filter(|o| o.passed_onboarding).count() as u64,
        completed: outcomes.iter().filter(|o| o.completed).count() as u64,
        errors: outcomes.iter().filter(|o| o.error.is_some()).count() as u64,
        envelopes,
        retries: outcomes.iter().map(|o| o.retries).sum(),
        wall_s,
        envelopes_per_s: if wall_s > 0.0 {
            envelopes as f64 / wall_s
        } else {
            0.0
        },
        p95_ingest_ms: percentile(&latencies, 0.95),
    };
    Ok(CohortResult { outcomes, report })
}

/// Assignment with retries. A conflict on a retried attempt means an earlier
/// attempt got through, so the existing record is taken.
async fn assign_idempotent(
    poster: &mut Poster<'_>,
    pid: &str,
) -> Result<ParticipantRecord, ApiError> {
    let api = poster.api;
    match poster.call(|| api.assign(pid)).await {
        Err(ApiError::Status { status: 409, body }) if poster.retries > 0 => {
            let v: Value =
                serde_json::from_str(&body).map_err(|e| ApiError::Decode(e.to_string()))?;
            serde_json::from_value::<ParticipantRecord>(v["existing"].clone())
                .ok()
                .filter(|r| r.participant_id == pid)
                .ok_or(ApiError::Status { status: 409, body })
        }
        other => other,
    }
}
