use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn exac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_exac"))
        .args(args)
        .current_dir(dir)
        .env_remove("EXAC_ENDPOINT")
        .env("EXAC_LOG", "warn")
        .output()
        .expect("running exac")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn free_port() -> u16 {
    std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("experiment.json"),
        r#"{"name":"wf","salt":"s3cr3t"}"#,
    )
    .unwrap();
    dir
}

#[test]
fn unknown_flag_exits_2() {
    let dir = workspace();
    assert_eq!(
        exac(dir.path(), &["deploy", "--bogus"]).status.code(),
        Some(2)
    );
    assert_eq!(exac(dir.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_manifest_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = exac(dir.path(), &["deploy", "--executor", "mock"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("experiment.json"));
}

#[test]
fn redeploy_prints_no_changes() {
    let dir = workspace();
    let first = exac(dir.path(), &["deploy", "--executor", "mock"]);
    assert_eq!(
        first.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let state: Value = serde_json::from_str(&stdout(&first)).unwrap();
    assert_eq!(state["resources"].as_array().unwrap().len(), 4);
    let second = exac(dir.path(), &["deploy", "--executor", "mock"]);
    assert_eq!(second.status.code(), Some(0));
    assert_eq!(stdout(&second).trim(), "no changes");
    let down = exac(dir.path(), &["teardown", "--executor", "mock"]);
    assert_eq!(down.status.code(), Some(0));
    let again = exac(dir.path(), &["teardown", "--executor", "mock"]);
    assert_eq!(stdout(&again).trim(), "no changes");
}

#[test]
fn monitor_with_service_down_alarms_and_exits_0() {
    let dir = workspace();
    let endpoint = format!("http://127.0.0.1:{}", free_port());
    let o = exac(
        dir.path(),
        &[
            "monitor",
            "--endpoint",
            &endpoint,
            "--interval-ms",
            "100",
            "--threshold",
            "3",
            "--ticks",
            "5",
        ],
    );
    assert_eq!(o.status.code(), Some(0));
    let alarms: Vec<Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["event"] == "alarm")
        .collect();
    assert_eq!(alarms.len(), 1);
    assert_eq!(alarms[0]["alarm"]["consecutive_failures"], 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains('\x07'));
}

#[test]
fn monitor_rejects_fast_interval() {
    let dir = workspace();
    let o = exac(
        dir.path(),
        &["monitor", "--interval-ms", "50", "--ticks", "1"],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn local_stack_verify_and_export() {
    let dir = workspace();
    let endpoint = format!("http://127.0.0.1:{}", free_port());
    let ep = ["--endpoint", endpoint.as_str()];
    let run = |args: &[&str]| {
        let mut all = args.to_vec();
        all.extend_from_slice(&ep);
        exac(dir.path(), &all)
    };
    let d = run(&["deploy"]);
    assert_eq!(
        d.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&d.stderr)
    );
    let result = std::panic::catch_unwind(|| {
        let s = run(&["simulate", "-n", "12", "--seed", "3"]);
        assert_eq!(
            s.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&s.stderr)
        );
        let outcomes: Vec<Value> =
            serde_json::from_slice(&fs::read(dir.path().join("out/simulate_3_0.json")).unwrap())
                .unwrap();
        assert_eq!(outcomes.len(), 12);
        // a second run continues the participant numbering
        let s2 = run(&["simulate", "-n", "2", "--seed", "3"]);
        assert_eq!(s2.status.code(), Some(0));
        assert!(dir.path().join("out/simulate_3_12.json").exists());

        let done = outcomes
            .iter()
            .find(|o| o["completed"] == true)
            .expect("a completed session");
        let sid = done["session_id"].as_str().unwrap();
        let code = done["code"].as_str().unwrap();
        let v = run(&["verify", "--session", sid, "--code", code]);
        assert_eq!(
            v.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&v.stderr)
        );
        let body: Value = serde_json::from_str(&stdout(&v)).unwrap();
        assert_eq!(body["status"], "rewarded");
        let again = run(&["verify", "--session", sid, "--code", code]);
        assert_eq!(again.status.code(), Some(1));
        let body: Value = serde_json::from_str(&stdout(&again)).unwrap();
        assert_eq!(body["reason"], "already_rewarded");

        let e = run(&["export"]);
        assert_eq!(e.status.code(), Some(0));
        let trials = fs::read_dir(dir.path().join("out/trajectories").join(sid))
            .unwrap()
            .count();
        assert_eq!(trials, 6);
        assert!(dir.path().join(format!("out/events/{sid}.csv")).exists());
    });
    let t = run(&["teardown"]);
    assert_eq!(t.status.code(), Some(0));
    if let Err(p) = result {
        std::panic::resume_unwind(p);
    }
    assert!(!dir.path().join("exac-data/bucket").exists());
    let m = run(&["monitor", "--interval-ms", "100", "--ticks", "4"]);
    assert!(
        stdout(&m).contains("\"alarm\""),
        "service still up after teardown"
    );
}
