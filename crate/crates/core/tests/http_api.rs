use std::sync::Arc;

use exac_core::api::{ApiClient, ApiError};
use exac_core::assembly::{
    AssemblyConfig, AssemblyService, MemoryStorage, SessionState, TrialStatus,
};
use exac_core::completion::derive_code;
use exac_core::management::{
    AssignmentStrategy, Management, MockRecruitmentClient, Registry, RewardPolicy,
};
use exac_core::manifest::ExperimentManifest;
use exac_core::protocol::{
    chunk_payload, encode_trajectory, StreamMeta, TrajectorySample, WireEnvelope,
};
use exac_core::server::{router, AppState, VerifyResponse};
use serde_json::{Map, Value};

struct Stack {
    api: ApiClient,
    base: String,
    client: Arc<MockRecruitmentClient>,
}

async fn start() -> Stack {
    let m = ExperimentManifest::with_defaults("wf", "pepper");
    let assembly = Arc::new(AssemblyService::new(
        AssemblyConfig {
            salt: m.salt.clone(),
            challenge_seed: Some(3),
            ..AssemblyConfig::default()
        },
        Arc::new(MemoryStorage::new()),
    ));
    let client = Arc::new(MockRecruitmentClient::new());
    let registry = Arc::new(Registry::in_memory(
        m.treatments.clone(),
        AssignmentStrategy::Balanced,
        9,
    ));
    let mgmt = Arc::new(Management::new(
        registry,
        client.clone(),
        RewardPolicy::from_manifest(&m),
        &m.salt,
    ));
    let state = AppState::new(assembly, mgmt);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    Stack {
        api: ApiClient::new(&base).unwrap(),
        base,
        client,
    }
}

fn event(session: &str, name: &str) -> WireEnvelope {
    let mut data = Map::new();
    data.insert("os".into(), Value::from("Linux"));
    data.insert("browser".into(), Value::from("Firefox"));
    WireEnvelope::event(session, 0, 1, name, data)
}

fn trial_envelopes(session: &str, trial: u32) -> (Vec<TrajectorySample>, Vec<WireEnvelope>) {
    let samples: Vec<_> = (0..300)
        .map(|i| TrajectorySample {
            t: i as f64 * 0.02,
            x: (i as f64 * 0.05).sin(),
            y: 0.0,
            z: i as f64 * 0.05,
            yaw: -45.0,
            pitch: 0.0,
        })
        .collect();
    let payload = encode_trajectory(&samples).unwrap();
    let meta = StreamMeta {
        session: session.into(),
        trial,
        ts_ms: 2,
        sample_hz: 50.0,
    };
    (
        samples,
        chunk_payload(&payload, 4300, &meta).into_envelopes(),
    )
}

#[tokio::test(flavor = "multi_thread")]
async fn full_session_over_http() {
    let s = start().await;
    assert_eq!(s.api.health().await.unwrap()["status"], "ok");
    let rec = s.api.assign("p1").await.unwrap();
    assert_eq!(rec.session_id, "s-p1");
    assert!(matches!(
        s.api.assign("p1").await,
        Err(ApiError::Status { status: 409, .. })
    ));
    let sid = rec.session_id.as_str();
    for name in ["onboarding_pass", "consent_given", "trial_start"] {
        s.api.post_envelope(&event(sid, name)).await.unwrap();
    }
    let (samples, envs) = trial_envelopes(sid, 1);
    let mut last = None;
    for e in envs.iter().rev() {
        last = Some(s.api.post_envelope(e).await.unwrap());
    }
    assert_eq!(last.unwrap().trial_status, Some(TrialStatus::Reconstructed));
    for name in ["trial_end", "session_complete"] {
        s.api.post_envelope(&event(sid, name)).await.unwrap();
    }

    let csv = String::from_utf8(s.api.trial_csv(sid, 1).await.unwrap()).unwrap();
    assert_eq!(csv.lines().count(), samples.len() + 1);
    assert!(csv
        .lines()
        .nth(1)
        .unwrap()
        .starts_with(&format!("s-p1,p1,{},1,", rec.treatment)));
    let events = String::from_utf8(s.api.events_csv(sid).await.unwrap()).unwrap();
    assert_eq!(events.lines().count(), 6);

    let ch = s.api.challenge(sid).await.unwrap();
    let code = derive_code(&ch, "pepper").unwrap();
    assert!(!s.api.complete(sid, "WRONGWRONGWR").await.unwrap());
    assert!(s
        .api
        .complete(sid, &code.as_str().to_lowercase())
        .await
        .unwrap());

    let sessions = s.api.sessions().await.unwrap();
    assert_eq!(sessions.len(), 1);
    assert_eq!(sessions[0].state, SessionState::Completed);
    let status = s.api.status().await.unwrap();
    assert_eq!(status.trials_reconstructed, 1);
    assert_eq!(status.sessions_total, 1);

    let funnel = s.api.funnel().await.unwrap();
    assert_eq!(
        (funnel.accessed, funnel.capable, funnel.completed),
        (1, 1, 1)
    );
    assert_eq!(funnel.cells[0].os, "Linux");

    match s.api.verify(sid, "WRONGWRONGWR").await.unwrap() {
        VerifyResponse::Rejected { reason } => assert_eq!(reason, "bad_code"),
        other => panic!("{other:?}"),
    }
    match s.api.verify(sid, code.as_str()).await.unwrap() {
        VerifyResponse::Rewarded { reward } => assert_eq!(reward.total_usd, 5.5),
        other => panic!("{other:?}"),
    }
    match s.api.verify(sid, code.as_str()).await.unwrap() {
        VerifyResponse::Rejected { reason } => assert_eq!(reason, "already_rewarded"),
        other => panic!("{other:?}"),
    }
    assert_eq!(s.client.pay_calls()["s-p1"].len(), 1);
    let parts = s.api.participants().await.unwrap();
    assert!(parts[0].verified && parts[0].reward.is_some());
    assert!(s.api.mgmt_health().await.unwrap().is_empty());
}

#[tokio::test]
async fn error_statuses() {
    let s = start().await;
    let http = reqwest::Client::new();
    let r = http
        .post(format!("{}/v1/messages", s.base))
        .body(
            r#"{"v":1,"session":"x","kind":"chunk","trial":1,"ts_ms":0,"payload":{"b64":"AA=="}}"#,
        )
        .send()
        .await
        .unwrap();
    assert_eq!(r.status(), 400);
    let body: Value = r.json().await.unwrap();
    assert_eq!(body["path"], "seq");

    let (_, envs) = trial_envelopes("x", 1);
    s.api.post_envelope(&envs[1]).await.unwrap();
    let mut evil = envs[1].clone();
    if let exac_core::protocol::Body::Chunk { bytes, .. } = &mut evil.body {
        let mut flipped = bytes.to_vec();
        flipped[0] ^= 1;
        *bytes = flipped.into();
    }
    assert!(matches!(
        s.api.post_envelope(&evil).await,
        Err(ApiError::Status { status: 409, .. })
    ));
    assert!(matches!(
        s.api.trial_csv("x", 1).await,
        Err(ApiError::Status { status: 409, .. })
    ));
    assert!(matches!(
        s.api.events_csv("nobody").await,
        Err(ApiError::Status { status: 404, .. })
    ));
    assert!(matches!(
        s.api.challenge("nobody").await,
        Err(ApiError::Status { status: 404, .. })
    ));
}

#[tokio::test]
async fn cors_preflight_allowed() {
    let s = start().await;
    let r = reqwest::Client::new()
        .request(
            reqwest::Method::OPTIONS,
            format!("{}/v1/mgmt/funnel", s.base),
        )
        .header("Origin", "http://dashboard.local")
        .header("Access-Control-Request-Method", "GET")
        .send()
        .await
        .unwrap();
    assert!(r.status().is_success());
    assert!(r.headers().contains_key("access-control-allow-origin"));
}
