//! Plan/apply/teardown engine over a fixed chain of experiment resources.
//!
//! ```text
//! storage_bucket -> assembly_service -> static_content -> recruitment_hits
//! ```
//!
//! Resources are created left to right and destroyed right to left. The state
//! is persisted after every mutation, so an interrupted apply leaves a state
//! file that re-plans exactly the remaining actions.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ExperimentManifest;

#[derive(Debug, thiserror::Error)]
pub enum LifecycleError {
    #[error("state corrupt: {0}")]
    StateCorrupt(String),
    #[error("executor failed on {action}: {msg}")]
    Executor { action: String, msg: String },
    #[error("state file {0} is locked by another process")]
    Locked(PathBuf),
    #[error("state file {path}: {msg}")]
    Persist { path: PathBuf, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    StorageBucket,
    AssemblyService,
    StaticContent,
    RecruitmentHits,
}

impl ResourceKind {
    /// Dependency order.
    pub const ALL: [ResourceKind; 4] = [
        ResourceKind::StorageBucket,
        ResourceKind::AssemblyService,
        ResourceKind::StaticContent,
        ResourceKind::RecruitmentHits,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            ResourceKind::StorageBucket => "bucket",
            ResourceKind::AssemblyService => "assembly",
            ResourceKind::StaticContent => "static",
            ResourceKind::RecruitmentHits => "hits",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceStatus {
    Planned,
    Created,
    Destroyed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resource {
    pub id: String,
    pub kind: ResourceKind,
    pub status: ResourceStatus,
    #[serde(default)]
    pub attrs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LifecycleState {
    pub resources: Vec<Resource>,
    pub revision: u64,
}

impl LifecycleState {
    pub fn get(&self, kind: ResourceKind) -> Option<&Resource> {
        self.resources.iter().find(|r| r.kind == kind)
    }

    pub fn is_created(&self, kind: ResourceKind) -> bool {
        self.get(kind)
            .is_some_and(|r| r.status == ResourceStatus::Created)
    }

    pub fn created(&self) -> impl Iterator<Item = &Resource> {
        self.resources
            .iter()
            .filter(|r| r.status == ResourceStatus::Created)
    }

    /// Created resources must form a prefix of the dependency chain, and each
    /// kind may appear at most once.
    pub fn check_order(&self) -> Result<(), LifecycleError> {
        for (i, r) in self.resources.iter().enumerate() {
            if self.resources[..i].iter().any(|o| o.kind == r.kind) {
                return Err(LifecycleError::StateCorrupt(format!(
                    "resource kind {:?} listed twice",
                    r.kind
                )));
            }
        }
        let mut gap = None;
        for kind in ResourceKind::ALL {
            match (self.is_created(kind), gap) {
                (false, None) => gap = Some(kind),
                (true, Some(missing)) => {
                    return Err(LifecycleError::StateCorrupt(format!(
                        "{kind:?} is created but its dependency {missing:?} is not"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn upsert(&mut self, r: Resource) {
        match self.resources.iter_mut().find(|o| o.kind == r.kind) {
            Some(slot) => *slot = r,
            None => {
                self.resources.push(r);
                self.resources.sort_by_key(|r| r.kind);
            }
        }
    }

    fn set_status(&mut self, kind: ResourceKind, status: ResourceStatus) {
        if let Some(r) = self.resources.iter_mut().find(|r| r.kind == kind) {
            r.status = status;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionOp {
    Create,
    Destroy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedAction {
    pub op: ActionOp,
    pub id: String,
    pub kind: ResourceKind,
}

impl std::fmt::Display for PlannedAction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let op = match self.op {
            ActionOp::Create => "create",
            ActionOp::Destroy => "destroy",
        };
        write!(f, "{op} {} ({})", self.id, self.kind.slug())
    }
}

pub fn resource_id(m: &ExperimentManifest, kind: ResourceKind) -> String {
    format!("{}-{}", m.name, kind.slug())
}

/// A driver that materializes resources.
pub trait Executor {
    /// Creates the resource and returns attributes to record in the state.
    fn create(
        &mut self,
        action: &PlannedAction,
        state: &LifecycleState,
    ) -> Result<BTreeMap<String, String>, String>;

    fn destroy(&mut self, resource: &Resource) -> Result<(), String>;
}

/// Receives every intermediate state. [`StateFile`] writes it to disk.
pub trait StateSink {
    fn persist(&mut self, state: &LifecycleState) -> Result<(), LifecycleError>;
}

/// Discards states.
pub struct NoPersist;

impl StateSink for NoPersist {
    fn persist(&mut self, _state: &LifecycleState) -> Result<(), LifecycleError> {
        Ok(())
    }
}

#[derive(Debug)]
pub struct ApplyFailure {
    /// State including every action that completed before the failure.
    pub state: LifecycleState,
    pub error: LifecycleError,
}

impl std::fmt::Display for ApplyFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for ApplyFailure {}

pub fn plan(
    m: &ExperimentManifest,
    state: &LifecycleState,
) -> Result<Vec<PlannedAction>, LifecycleError> {
    state.check_order()?;
    Ok(ResourceKind::ALL
        .into_iter()
        .filter(|&k| !state.is_created(k))
        .map(|kind| PlannedAction {
            op: ActionOp::Create,
            id: resource_id(m, kind),
            kind,
        })
        .collect())
}

pub fn apply(
    plan: &[PlannedAction],
    mut state: LifecycleState,
    exec: &mut dyn Executor,
    sink: &mut dyn StateSink,
) -> Result<LifecycleState, ApplyFailure> {
    let fail = |state: LifecycleState, error| Err(ApplyFailure { state, error });
    if let Err(e) = state.check_order() {
        return fail(state, e);
    }
    let pending: Vec<&PlannedAction> = plan
        .iter()
        .filter(|a| a.op == ActionOp::Create && !state.is_created(a.kind))
        .collect();
    if pending.is_empty() {
        return Ok(state);
    }
    for a in &pending {
        state.upsert(Resource {
            id: a.id.clone(),
            kind: a.kind,
            status: ResourceStatus::Planned,
            attrs: BTreeMap::new(),
        });
    }
    state.revision += 1;
    if let Err(e) = sink.persist(&state) {
        return fail(state, e);
    }
    for a in pending {
        let deps_ok = ResourceKind::ALL
            .iter()
            .take_while(|&&k| k < a.kind)
            .all(|&k| state.is_created(k));
        if !deps_ok {
            let e = LifecycleError::StateCorrupt(format!("{a}: dependencies not created"));
            return fail(state, e);
        }
        match exec.create(a, &state) {
            Ok(attrs) => {
                state.upsert(Resource {
                    id: a.id.clone(),
                    kind: a.kind,
                    status: ResourceStatus::Created,
                    attrs,
                });
                state.revision += 1;
                if let Err(e) = sink.persist(&state) {
                    return fail(state, e);
                }
            }
            Err(msg) => {
                let e = LifecycleError::Executor {
                    action: a.to_string(),
                    msg,
                };
                return fail(state, e);
            }
        }
    }
    Ok(state)
}

/// Destroys created resources in reverse dependency order. Resources left in
/// `planned` by an interrupted apply are marked destroyed without a driver
/// call.
pub fn teardown(
    mut state: LifecycleState,
    exec: &mut dyn Executor,
    sink: &mut dyn StateSink,
) -> Result<LifecycleState, ApplyFailure> {
    for kind in ResourceKind::ALL.into_iter().rev() {
        let Some(r) = state.get(kind).cloned() else {
            continue;
        };
        match r.status {
            ResourceStatus::Destroyed => continue,
            ResourceStatus::Planned => {}
            ResourceStatus::Created => {
                if let Err(msg) = exec.destroy(&r) {
                    let error = LifecycleError::Executor {
                        action: format!("destroy {} ({})", r.id, kind.slug()),
                        msg,
                    };
                    return Err(ApplyFailure { state, error });
                }
            }
        }
        state.set_status(kind, ResourceStatus::Destroyed);
        state.revision += 1;
        if let Err(error) = sink.persist(&state) {
            return Err(ApplyFailure { state, error });
        }
    }
    Ok(state)
}

/// Records every call; optionally fails on the n-th call (1-based) or sleeps
/// before each call.
#[derive(Debug, Default)]
pub struct MockExecutor {
    pub calls: Vec<String>,
    pub fail_on_call: Option<usize>,
    pub delay: Option<Duration>,
}

impl MockExecutor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn failing_on(n: usize) -> Self {
        Self {
            fail_on_call: Some(n),
            ..Self::default()
        }
    }

    fn record(&mut self, call: String) -> Result<(), String> {
        if let Some(d) = self.delay {
            std::thread::sleep(d);
        }
        self.calls.push(call);
        if self.fail_on_call == Some(self.calls.len()) {
            return Err(format!("injected failure on call {}", self.calls.len()));
        }
        Ok(())
    }
}

impl Executor for MockExecutor {
    fn create(
        &mut self,
        action: &PlannedAction,
        _state: &LifecycleState,
    ) -> Result<BTreeMap<String, String>, String> {
        self.record(format!("create {}", action.id))?;
        Ok(BTreeMap::from([("driver".to_string(), "mock".to_string())]))
    }

    fn destroy(&mut self, resource: &Resource) -> Result<(), String> {
        self.record(format!("destroy {}", resource.id))
    }
}

/// JSON state file with an advisory lock held for the lifetime of the value.
/// Writes go to a temporary sibling and are renamed over the target.
#[derive(Debug)]
pub struct StateFile {
    path: PathBuf,
    _lock: File,
}

impl StateFile {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self, LifecycleError> {
        let path = path.into();
        let persist_err = |msg: String| LifecycleError::Persist {
            path: path.clone(),
            msg,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| persist_err(e.to_string()))?;
        }
        let lock_path = sibling(&path, "lock");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(|e| persist_err(e.to_string()))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => return Err(LifecycleError::Locked(path)),
            Err(std::fs::TryLockError::Error(e)) => return Err(persist_err(e.to_string())),
        }
        Ok(Self { path, _lock: lock })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// A missing file is an empty state.
    pub fn load(&self) -> Result<LifecycleState, LifecycleError> {
        load_state(&self.path)
    }

    pub fn save(&self, state: &LifecycleState) -> Result<(), LifecycleError> {
        let err = |e: std::io::Error| LifecycleError::Persist {
            path: self.path.clone(),
            msg: e.to_string(),
        };
        let tmp = sibling(&self.path, "tmp");
        let mut bytes = serde_json::to_vec_pretty(state).expect("state serializes");
        bytes.push(b'\n');
        let mut f = File::create(&tmp).map_err(err)?;
        f.write_all(&bytes).map_err(err)?;
        f.sync_all().map_err(err)?;
        drop(f);
        fs::rename(&tmp, &self.path).map_err(err)
    }
}

impl StateSink for StateFile {
    fn persist(&mut self, state: &LifecycleState) -> Result<(), LifecycleError> {
        self.save(state)
    }
}

/// Reads a state file without taking the lock.
pub fn load_state(path: &Path) -> Result<LifecycleState, LifecycleError> {
    match fs::read(path) {
        Ok(bytes) => {
            let state: LifecycleState = serde_json::from_slice(&bytes)
                .map_err(|e| LifecycleError::StateCorrupt(e.to_string()))?;
            state.check_order()?;
            Ok(state)
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(LifecycleState::default()),
        Err(e) => Err(LifecycleError::Persist {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }),
    }
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".");
    name.push(ext);
    path.with_file_name(name)
}
