//! Lifecycle driver that provisions the experiment on this machine: a
//! storage directory, an `exac serve` child process, a static-content
//! directory and HIT batches on the mock recruitment client.

use std::collections::BTreeMap;
use std::fs;
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use exac_core::management::{create_hits, HitBook, HitSpec, MockRecruitmentClient};
use exac_core::manifest::lifecycle::{
    Executor, LifecycleState, PlannedAction, Resource, ResourceKind,
};
use exac_core::manifest::ExperimentManifest;

pub const HIT_BATCH_SIZE: u32 = 9;

pub struct LocalExecutor {
    pub manifest: ExperimentManifest,
    pub manifest_path: PathBuf,
    pub data_dir: PathBuf,
    pub registry: PathBuf,
    pub endpoint: String,
    pub seed: u64,
    pub hit_batches: u32,
    pub exe: PathBuf,
    pub ready_timeout: Duration,
}

fn abs(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn io(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// `http://host:port[/]` to a socket address.
pub fn listen_addr(endpoint: &str) -> Result<SocketAddr, String> {
    let rest = endpoint
        .strip_prefix("http://")
        .ok_or_else(|| format!("endpoint {endpoint:?} must start with http://"))?;
    let hostport = rest.split('/').next().unwrap_or_default();
    hostport
        .to_socket_addrs()
        .map_err(|e| format!("endpoint {endpoint:?}: {e}"))?
        .next()
        .ok_or_else(|| format!("endpoint {endpoint:?} resolves to nothing"))
}

impl LocalExecutor {
    fn bucket(&self) -> PathBuf {
        self.data_dir.join("bucket")
    }

    fn start_service(&self, state: &LifecycleState) -> Result<BTreeMap<String, String>, String> {
        let storage = state
            .get(ResourceKind::StorageBucket)
            .and_then(|r| r.attrs.get("path"))
            .map(PathBuf::from)
            .unwrap_or_else(|| self.bucket());
        let addr = listen_addr(&self.endpoint)?;
        fs::create_dir_all(&self.data_dir).map_err(io)?;
        let log_path = self.data_dir.join("assembly.log");
        let log = fs::File::create(&log_path).map_err(io)?;
        let mut child = {
            use std::os::unix::process::CommandExt;
            Command::new(&self.exe)
                .arg("serve")
                .arg("--listen")
                .arg(addr.to_string())
                .arg("--storage")
                .arg(abs(&storage))
                .arg("--registry")
                .arg(abs(&self.registry))
                .arg("--manifest")
                .arg(abs(&self.manifest_path))
                .arg("--seed")
                .arg(self.seed.to_string())
                .stdin(Stdio::null())
                .stdout(Stdio::null())
                .stderr(log)
                .process_group(0)
                .spawn()
                .map_err(|e| format!("spawning {}: {e}", self.exe.display()))?
        };
        let deadline = Instant::now() + self.ready_timeout;
        loop {
            if let Some(status) = child.try_wait().map_err(io)? {
                let tail = fs::read_to_string(&log_path).unwrap_or_default();
                return Err(format!(
                    "assembly service exited with {status}: {}",
                    tail.trim()
                ));
            }
            if TcpStream::connect_timeout(&addr, Duration::from_millis(200)).is_ok() {
                break;
            }
            if Instant::now() > deadline {
                let _ = child.kill();
                return Err(format!("assembly service not listening on {addr}"));
            }
            std::thread::sleep(Duration::from_millis(50));
        }
        Ok(BTreeMap::from([
            ("pid".to_string(), child.id().to_string()),
            (
                "endpoint".to_string(),
                self.endpoint.trim_end_matches('/').to_string(),
            ),
            ("log".to_string(), abs(&log_path).display().to_string()),
        ]))
    }

    fn write_static(&self) -> Result<BTreeMap<String, String>, String> {
        let dir = self.data_dir.join("static");
        fs::create_dir_all(&dir).map_err(io)?;
        let m = &self.manifest;
        let config = serde_json::json!({
            "experiment": m.name,
            "endpoint": self.endpoint.trim_end_matches('/'),
            "treatments": m.treatments,
            "trials_per_participant": m.trials_per_participant,
            "sample_period_ms": m.sample_period_ms,
            "chunk_size_bytes": m.chunk_size_bytes,
        });
        let mut bytes = serde_json::to_vec_pretty(&config).map_err(io)?;
        bytes.push(b'\n');
        fs::write(dir.join("config.json"), bytes).map_err(io)?;
        let index = format!(
            "<!doctype html>\n<html><head><meta charset=\"utf-8\"><title>{}</title></head>\n\
             <body><div id=\"app\" data-config=\"config.json\"></div></body></html>\n",
            m.name
        );
        fs::write(dir.join("index.html"), index).map_err(io)?;
        Ok(BTreeMap::from([(
            "path".to_string(),
            abs(&dir).display().to_string(),
        )]))
    }

    fn post_hits(&self, state: &LifecycleState) -> Result<BTreeMap<String, String>, String> {
        let url = state
            .get(ResourceKind::StaticContent)
            .and_then(|r| r.attrs.get("path"))
            .map(|p| format!("file://{p}/index.html"))
            .unwrap_or_default();
        let spec = HitSpec {
            title: self.manifest.name.clone(),
            reward_usd: self.manifest.reward_base_usd,
            max_assignments: HIT_BATCH_SIZE,
            external_url: url,
        };
        let path = self.data_dir.join("hits.json");
        let mut book: HitBook = match fs::read(&path) {
            Ok(b) => serde_json::from_slice(&b).map_err(io)?,
            Err(_) => HitBook::default(),
        };
        let client = MockRecruitmentClient::new();
        let result = create_hits(&spec, self.hit_batches, &client, &mut book);
        fs::write(&path, serde_json::to_vec_pretty(&book).map_err(io)?).map_err(io)?;
        let ids = result.map_err(io)?;
        Ok(BTreeMap::from([
            ("book".to_string(), abs(&path).display().to_string()),
            ("hit_ids".to_string(), ids.join(",")),
        ]))
    }
}

impl Executor for LocalExecutor {
    fn create(
        &mut self,
        action: &PlannedAction,
        state: &LifecycleState,
    ) -> Result<BTreeMap<String, String>, String> {
        match action.kind {
            ResourceKind::StorageBucket => {
                let dir = self.bucket();
                fs::create_dir_all(&dir).map_err(io)?;
                Ok(BTreeMap::from([(
                    "path".to_string(),
                    abs(&dir).display().to_string(),
                )]))
            }
            ResourceKind::AssemblyService => self.start_service(state),
            ResourceKind::StaticContent => self.write_static(),
            ResourceKind::RecruitmentHits => self.post_hits(state),
        }
    }

    fn destroy(&mut self, r: &Resource) -> Result<(), String> {
        let remove = |key: &str, dir: bool| -> Result<(), String> {
            let Some(p) = r.attrs.get(key) else {
                return Ok(());
            };
            let res = if dir {
                fs::remove_dir_all(p)
            } else {
                fs::remove_file(p)
            };
            match res {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
                    Err(format!("removing {p}: {e}"))
                }
                _ => Ok(()),
            }
        };
        match r.kind {
            ResourceKind::StorageBucket => remove("path", true),
            ResourceKind::AssemblyService => {
                match r.attrs.get("pid").and_then(|p| p.parse::<i32>().ok()) {
                    Some(pid) => stop_process(pid, Duration::from_secs(5)),
                    None => Ok(()),
                }
            }
            ResourceKind::StaticContent => remove("path", true),
            ResourceKind::RecruitmentHits => remove("book", false),
        }
    }
}

fn is_our_server(pid: i32) -> bool {
    match fs::read(format!("/proc/{pid}/cmdline")) {
        Ok(cmd) => {
            let args: Vec<&[u8]> = cmd.split(|b| *b == 0).collect();
            args.iter().any(|a| *a == b"serve")
        }
        Err(_) => false,
    }
}

fn alive(pid: i32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        // a zombie has exited; only its parent can reap it
        Ok(stat) => stat
            .rsplit_once(')')
            .map(|(_, rest)| !rest.trim_start().starts_with('Z'))
            .unwrap_or(true),
        Err(_) => false,
    }
}

/// SIGTERM, then SIGKILL after `grace`. A pid that no longer belongs to an
/// `exac serve` process is left alone.
pub fn stop_process(pid: i32, grace: Duration) -> Result<(), String> {
    if !alive(pid) || !is_our_server(pid) {
        return Ok(());
    }
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe { libc::kill(pid, libc::SIGTERM) };
    let deadline = Instant::now() + grace;
    while alive(pid) {
        if Instant::now() > deadline {
            // SAFETY: as above.
            unsafe { libc::kill(pid, libc::SIGKILL) };
            std::thread::sleep(Duration::from_millis(100));
            return if alive(pid) {
                Err(format!("process {pid} did not exit"))
            } else {
                Ok(())
            };
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_to_addr() {
        assert_eq!(listen_addr("http://127.0.0.1:8750").unwrap().port(), 8750);
        assert_eq!(listen_addr("http://127.0.0.1:9/").unwrap().port(), 9);
        assert!(listen_addr("ftp://x:1").is_err());
    }

    #[test]
    fn static_content_and_hits() {
        let dir = tempfile::tempdir().unwrap();
        let mut ex = LocalExecutor {
            manifest: ExperimentManifest::with_defaults("wf", "s"),
            manifest_path: dir.path().join("experiment.json"),
            data_dir: dir.path().join("data"),
            registry: dir.path().join("registry.jsonl"),
            endpoint: "http://127.0.0.1:1".into(),
            seed: 0,
            hit_batches: 3,
            exe: PathBuf::from("/nonexistent"),
            ready_timeout: Duration::from_secs(1),
        };
        let attrs = ex.write_static().unwrap();
        let cfg: serde_json::Value = serde_json::from_slice(
            &fs::read(Path::new(&attrs["path"]).join("config.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(cfg["chunk_size_bytes"], 4300);
        let hits = ex.post_hits(&LifecycleState::default()).unwrap();
        assert_eq!(hits["hit_ids"].split(',').count(), 3);
        let r = Resource {
            id: "wf-hits".into(),
            kind: ResourceKind::RecruitmentHits,
            status: exac_core::manifest::lifecycle::ResourceStatus::Created,
            attrs: hits,
        };
        ex.destroy(&r).unwrap();
        ex.destroy(&r).unwrap();
        assert!(!dir.path().join("data/hits.json").exists());
    }
}
