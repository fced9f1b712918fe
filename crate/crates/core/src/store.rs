//! Sharded on-disk system state.
//!
//! ```text
//! <root>/manifest.json                      write-once experiment manifest
//! <root>/components/<id>.bin                 write-once component blobs
//! <root>/tasks/<task>/best/<version>.json    write-once best-path versions
//! <root>/tasks/<task>/iter/<agent>.<n>.done  empty completion markers
//! ```
//!
//! Every file is written to a `.tmp-*` sibling first and then hard-linked to
//! its final name, which fails instead of overwriting when the name exists.
//! The highest best version of a task is its current best. Readers skip temp
//! files, so a writer killed at any point leaves a loadable store.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::canonical;
use crate::graph::{
    validate_path, AgentId, Component, ComponentId, GraphError, LayerBounds, ModelPath, RootModel,
    SearchSpace, SystemState, TaskId, TaskInfo, Violation,
};

pub const FORMAT_VERSION: u32 = 1;
const TEMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("integrity violation at {path}: {reason}")]
    IntegrityViolation { path: PathBuf, reason: String },
    #[error("dangling component {0}")]
    DanglingComponent(ComponentId),
    #[error("best-path conflict for task {task}: expected {expected:?}, found {found:?}")]
    Conflict {
        task: TaskId,
        expected: Option<String>,
        found: Option<String>,
    },
    #[error("marker for agent {agent} iteration {iteration} already exists")]
    DuplicateMarker { agent: AgentId, iteration: u64 },
    #[error("barrier for iteration {iteration} timed out waiting for {missing:?}")]
    BarrierTimeout {
        iteration: u64,
        missing: Vec<AgentId>,
    },
    #[error("store at {0} is not initialized")]
    NotInitialized(PathBuf),
    #[error("store at {0} already holds a different manifest")]
    ManifestMismatch(PathBuf),
    #[error("agent {0} is not registered in the manifest")]
    UnknownAgent(AgentId),
    #[error("task {0} is not registered in the manifest")]
    UnknownTask(TaskId),
    #[error("path for task {task} is invalid: {violations:?}")]
    InvalidPath {
        task: TaskId,
        violations: Vec<Violation>,
    },
    #[error("malformed record at {path}: {reason}")]
    MalformedRecord { path: PathBuf, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl StoreError {
    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn is_transient(&self) -> bool {
        matches!(self, StoreError::Io { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub root: RootModel,
    pub tasks: BTreeMap<TaskId, TaskInfo>,
    pub agents: Vec<AgentId>,
    pub layer_bounds: LayerBounds,
    pub search_space: SearchSpace,
}

/// One version of a task's best path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub path: ModelPath,
    /// Task iteration during which this version was published.
    pub published_iteration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    AfterTempWrite,
    AfterLink,
}

/// Aborts the process at the `trigger`-th write reaching `point`. Used to
/// simulate crashes mid-publish.
#[derive(Debug, Default)]
pub struct FaultInjector {
    plan: Option<(FaultPoint, u64)>,
    seen: AtomicU64,
}

impl FaultInjector {
    pub fn none() -> Self {
        FaultInjector::default()
    }

    pub fn abort_at(point: FaultPoint, trigger: u64) -> Self {
        FaultInjector {
            plan: Some((point, trigger)),
            seen: AtomicU64::new(0),
        }
    }

    fn hit(&self, point: FaultPoint) {
        if let Some((p, trigger)) = self.plan {
            if p == point && self.seen.fetch_add(1, Ordering::SeqCst) + 1 == trigger {
                std::process::abort();
            }
        }
    }
}

/// Run `op` up to `attempts` times, backing off between transient failures.
pub fn with_retry<T>(
    attempts: u32,
    mut op: impl FnMut() -> Result<T, StoreError>,
) -> Result<T, StoreError> {
    let mut delay = Duration::from_millis(5);
    let mut tries = 0;
    loop {
        match op() {
            Err(e) if e.is_transient() && tries + 1 < attempts.max(1) => {
                tries += 1;
                std::thread::sleep(delay);
                delay = (delay * 2).min(Duration::from_millis(500));
            }
            other => return other,
        }
    }
}

fn temp_name(dir: &Path) -> PathBuf {
    let nonce: u64 = rand::rng().random();
    dir.join(format!("{TEMP_PREFIX}{}-{nonce:016x}", std::process::id()))
}

fn is_temp(name: &str) -> bool {
    name.starts_with(TEMP_PREFIX)
}

fn read_file(path: &Path) -> Result<Vec<u8>, StoreError> {
    fs::read(path).map_err(|e| StoreError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), StoreError> {
    fs::create_dir_all(path).map_err(|e| StoreError::io(path, e))
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    manifest: Manifest,
    faults: Arc<FaultInjector>,
}

impl Store {
    /// Create the layout, publish the root components and write the manifest.
    /// Re-initializing with an identical manifest is a no-op.
    pub fn init(
        dir: &Path,
        manifest: Manifest,
        root_components: &[Component],
    ) -> Result<Store, StoreError> {
        create_dir(&dir.join("components"))?;
        create_dir(&dir.join("tasks"))?;
        let store = Store {
            dir: dir.to_path_buf(),
            manifest,
            faults: Arc::new(FaultInjector::none()),
        };
        for c in root_components {
            store.publish_component(c)?;
        }
        for id in &store.manifest.root.component_ids {
            if !store.component_path(id).exists() {
                return Err(StoreError::DanglingComponent(id.clone()));
            }
        }
        for t in store.manifest.tasks.keys() {
            create_dir(&store.task_dir(t).join("best"))?;
            create_dir(&store.task_dir(t).join("iter"))?;
        }
        let bytes = canonical::to_vec(&store.manifest).expect("manifest serializes");
        let path = dir.join("manifest.json");
        if !store.write_once(&path, &bytes)? && read_file(&path)? != bytes {
            return Err(StoreError::ManifestMismatch(dir.to_path_buf()));
        }
        Ok(store)
    }

    pub fn open(dir: &Path) -> Result<Store, StoreError> {
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(StoreError::NotInitialized(dir.to_path_buf()));
        }
        let bytes = read_file(&path)?;
        let manifest: Manifest =
            canonical::from_slice(&bytes).map_err(|e| StoreError::MalformedRecord {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        Ok(Store {
            dir: dir.to_path_buf(),
            manifest,
            faults: Arc::new(FaultInjector::none()),
        })
    }

    pub fn with_faults(mut self, faults: FaultInjector) -> Self {
        self.faults = Arc::new(faults);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn component_path(&self, id: &ComponentId) -> PathBuf {
        self.dir.join("components").join(format!("{id}.bin"))
    }

    fn task_dir(&self, task: &TaskId) -> PathBuf {
        self.dir.join("tasks").join(task.as_str())
    }

    fn marker_path(&self, agent: &AgentId, n: u64) -> PathBuf {
        self.dir
            .join("tasks")
            .join(agent.as_str())
            .join("iter")
            .join(format!("{agent}.{n}.done"))
    }

    /// Write `bytes` to `path` unless it exists. Returns false when the name
    /// was already taken.
    fn write_once(&self, path: &Path, bytes: &[u8]) -> Result<bool, StoreError> {
        let dir = path.parent().expect("store paths have a parent");
        let tmp = temp_name(dir);
        let result = (|| {
            let mut f = fs::File::create(&tmp).map_err(|e| StoreError::io(&tmp, e))?;
            f.write_all(bytes).map_err(|e| StoreError::io(&tmp, e))?;
            f.sync_all().map_err(|e| StoreError::io(&tmp, e))?;
            drop(f);
            self.faults.hit(FaultPoint::AfterTempWrite);
            match fs::hard_link(&tmp, path) {
                Ok(()) => {
                    self.faults.hit(FaultPoint::AfterLink);
                    Ok(true)
                }
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Ok(false),
                Err(e) => Err(StoreError::io(path, e)),
            }
        })();
        let _ = fs::remove_file(&tmp);
        result
    }

    /// Publish an immutable component. Publishing identical bytes again is a
    /// no-op; differing bytes under an existing id are an integrity violation.
    pub fn publish_component(&self, c: &Component) -> Result<ComponentId, StoreError> {
        let path = self.component_path(c.id());
        let bytes = c.to_bytes();
        if path.exists() || !self.write_once(&path, &bytes)? {
            let existing = read_file(&path)?;
            if existing != bytes {
                return Err(StoreError::IntegrityViolation {
                    path,
                    reason: "existing blob differs from published bytes".into(),
                });
            }
        }
        Ok(c.id().clone())
    }

    pub fn has_component(&self, id: &ComponentId) -> bool {
        self.component_path(id).exists()
    }

    /// Load and hash-verify one component.
    pub fn read_component(&self, id: &ComponentId) -> Result<Component, StoreError> {
        let path = self.component_path(id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::DanglingComponent(id.clone()))
            }
            Err(e) => return Err(StoreError::io(&path, e)),
        };
        let c = Component::from_bytes(&bytes).map_err(|e| StoreError::IntegrityViolation {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if c.id() != id {
            return Err(StoreError::IntegrityViolation {
                path,
                reason: format!("content hashes to {}", c.id()),
            });
        }
        Ok(c)
    }

    fn check_task(&self, task: &TaskId) -> Result<(), StoreError> {
        if self.manifest.tasks.contains_key(task) {
            Ok(())
        } else {
            Err(StoreError::UnknownTask(task.clone()))
        }
    }

    fn best_versions(&self, task: &TaskId) -> Result<Vec<u64>, StoreError> {
        let dir = self.task_dir(task).join("best");
        let entries = match fs::read_dir(&dir) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StoreError::io(&dir, e)),
        };
        let mut out = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if is_temp(&name) {
                continue;
            }
            if let Some(v) = name
                .strip_suffix(".json")
                .and_then(|s| s.parse::<u64>().ok())
            {
                out.push(v);
            }
        }
        out.sort_unstable();
        Ok(out)
    }

    fn read_best_version(&self, task: &TaskId, version: u64) -> Result<BestRecord, StoreError> {
        let path = self
            .task_dir(task)
            .join("best")
            .join(format!("{version:010}.json"));
        let bytes = read_file(&path)?;
        let rec: BestRecord =
            canonical::from_slice(&bytes).map_err(|e| StoreError::MalformedRecord {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if rec.path.task_id != *task {
            return Err(StoreError::MalformedRecord {
                path,
                reason: "record belongs to another task".into(),
            });
        }
        Ok(rec)
    }

    /// Current best of `task` with its version number.
    pub fn current_best(&self, task: &TaskId) -> Result<Option<(u64, BestRecord)>, StoreError> {
        self.check_task(task)?;
        match self.best_versions(task)?.last() {
            Some(&v) => Ok(Some((v, self.read_best_version(task, v)?))),
            None => Ok(None),
        }
    }

    /// Every published version of `task`'s best, oldest first.
    pub fn best_history(&self, task: &TaskId) -> Result<Vec<(u64, BestRecord)>, StoreError> {
        self.check_task(task)?;
        self.best_versions(task)?
            .into_iter()
            .map(|v| Ok((v, self.read_best_version(task, v)?)))
            .collect()
    }

    /// Compare-and-swap the best path of its task. `expected_prev` is the
    /// fingerprint of the best the caller based its decision on.
    pub fn publish_best(
        &self,
        path: &ModelPath,
        published_iteration: u64,
        expected_prev: Option<&str>,
    ) -> Result<u64, StoreError> {
        let task = &path.task_id;
        self.check_task(task)?;
        for id in path.all_ids() {
            if !self.has_component(id) {
                return Err(StoreError::DanglingComponent(id.clone()));
            }
        }
        let current = self.current_best(task)?;
        let found = current.as_ref().map(|(_, r)| r.path.fingerprint());
        if found.as_deref() != expected_prev {
            return Err(StoreError::Conflict {
                task: task.clone(),
                expected: expected_prev.map(str::to_string),
                found,
            });
        }
        let version = current.map_or(0, |(v, _)| v + 1);
        let record = BestRecord {
            path: path.clone(),
            published_iteration,
        };
        let bytes = canonical::to_vec(&record).expect("records serialize");
        let file = self
            .task_dir(task)
            .join("best")
            .join(format!("{version:010}.json"));
        if self.write_once(&file, &bytes)? {
            Ok(version)
        } else {
            let found = self.current_best(task)?.map(|(_, r)| r.path.fingerprint());
            Err(StoreError::Conflict {
                task: task.clone(),
                expected: expected_prev.map(str::to_string),
                found,
            })
        }
    }

    /// Latest version of `task`'s best published before iteration `bound`.
    pub fn best_before(
        &self,
        task: &TaskId,
        bound: u64,
    ) -> Result<Option<(u64, BestRecord)>, StoreError> {
        self.check_task(task)?;
        for v in self.best_versions(task)?.into_iter().rev() {
            let rec = self.read_best_version(task, v)?;
            if rec.published_iteration < bound {
                return Ok(Some((v, rec)));
            }
        }
        Ok(None)
    }

    /// Snapshot of the shared system with every task's current best. Every
    /// referenced component is loaded and hash-verified; the store is not
    /// modified.
    pub fn load_system_image(&self) -> Result<SystemState, StoreError> {
        self.load_image(None)
    }

    /// Snapshot holding only bests published before iteration `n`, the state
    /// every agent is guaranteed to see once the barrier for `n` has passed.
    pub fn load_system_image_before(&self, n: u64) -> Result<SystemState, StoreError> {
        self.load_image(Some(n))
    }

    fn load_image(&self, bound: Option<u64>) -> Result<SystemState, StoreError> {
        let m = &self.manifest;
        let mut state = SystemState {
            root: m.root.clone(),
            tasks: m.tasks.clone(),
            bounds: m.layer_bounds,
            search_space: m.search_space.clone(),
            bests: BTreeMap::new(),
            components: BTreeMap::new(),
            progress: BTreeMap::new(),
        };
        let mut wanted: BTreeSet<ComponentId> = m.root.component_ids.iter().cloned().collect();
        for t in m.tasks.keys() {
            let best = match bound {
                Some(n) => self.best_before(t, n)?,
                None => self.current_best(t)?,
            };
            if let Some((_, rec)) = best {
                wanted.extend(rec.path.all_ids().cloned());
                state.bests.insert(t.clone(), rec.path);
            }
        }
        for id in wanted {
            let c = self.read_component(&id)?;
            state.insert_component(Arc::new(c));
        }
        for a in &m.agents {
            state.progress.insert(a.clone(), self.progress(a)?);
        }
        Ok(state)
    }

    /// Number of contiguous completed iterations of `agent` starting at 0.
    pub fn progress(&self, agent: &AgentId) -> Result<u64, StoreError> {
        let mut n = 0;
        while self.marker_exists(agent, n) {
            n += 1;
        }
        Ok(n)
    }

    fn check_agent(&self, agent: &AgentId) -> Result<(), StoreError> {
        if self.manifest.agents.contains(agent) {
            Ok(())
        } else {
            Err(StoreError::UnknownAgent(agent.clone()))
        }
    }

    pub fn marker_exists(&self, agent: &AgentId, n: u64) -> bool {
        self.marker_path(agent, n).exists()
    }

    pub fn mark_iteration_complete(&self, agent: &AgentId, n: u64) -> Result<(), StoreError> {
        self.check_agent(agent)?;
        let path = self.marker_path(agent, n);
        let dir = path.parent().expect("marker has a parent");
        create_dir(dir)?;
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(StoreError::DuplicateMarker {
                    agent: agent.clone(),
                    iteration: n,
                })
            }
            Err(e) => Err(StoreError::io(&path, e)),
        }
    }

    /// Agents that have not yet completed iteration `n - 1`.
    pub fn barrier_missing(&self, n: u64) -> Vec<AgentId> {
        if n == 0 {
            return Vec::new();
        }
        self.manifest
            .agents
            .iter()
            .filter(|a| !self.marker_exists(a, n - 1))
            .cloned()
            .collect()
    }

    /// Block until every registered agent has completed iteration `n - 1`.
    pub fn wait_for_barrier(&self, n: u64, timeout: Duration) -> Result<(), StoreError> {
        let start = Instant::now();
        let mut delay = Duration::from_millis(1);
        let mut rng = rand::rng();
        loop {
            let missing = self.barrier_missing(n);
            if missing.is_empty() {
                return Ok(());
            }
            if start.elapsed() >= timeout {
                return Err(StoreError::BarrierTimeout {
                    iteration: n,
                    missing,
                });
            }
            let jitter = rng.random_range(0.5..1.5);
            let sleep = delay
                .mul_f64(jitter)
                .min(timeout.saturating_sub(start.elapsed()));
            std::thread::sleep(sleep);
            delay = (delay * 2).min(Duration::from_millis(50));
        }
    }

    /// Verify every blob hash and every best-path version against the store.
    pub fn audit(&self) -> Result<AuditReport, StoreError> {
        let mut report = AuditReport::default();
        let dir = self.dir.join("components");
        let mut components = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(|e| StoreError::io(&dir, e))? {
            let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_temp(&name) {
                report.temp_files += 1;
                continue;
            }
            let id = name
                .strip_suffix(".bin")
                .and_then(|s| ComponentId::parse(s).ok())
                .ok_or_else(|| StoreError::IntegrityViolation {
                    path: entry.path(),
                    reason: "unexpected file".into(),
                })?;
            let c = self.read_component(&id)?;
            components.insert(id, Arc::new(c));
            report.components += 1;
        }
        let image = self.load_system_image()?;
        for t in self.manifest.tasks.keys() {
            for (_, rec) in self.best_history(t)? {
                validate_path(&rec.path, &image, &components).map_err(|violations| {
                    StoreError::InvalidPath {
                        task: t.clone(),
                        violations,
                    }
                })?;
                report.best_records += 1;
            }
        }
        Ok(report)
    }

    /// Offline cleanup: drop superseded best versions, unreferenced
    /// components and leftover temp files. Never run while agents are active.
    pub fn gc(&self) -> Result<GcReport, StoreError> {
        let mut report = GcReport::default();
        let mut keep: BTreeSet<ComponentId> =
            self.manifest.root.component_ids.iter().cloned().collect();
        for t in self.manifest.tasks.keys() {
            let versions = self.best_versions(t)?;
            if let Some(&last) = versions.last() {
                keep.extend(self.read_best_version(t, last)?.path.all_ids().cloned());
            }
            for v in versions.iter().rev().skip(1) {
                let p = self.task_dir(t).join("best").join(format!("{v:010}.json"));
                fs::remove_file(&p).map_err(|e| StoreError::io(&p, e))?;
                report.best_versions_removed += 1;
            }
        }
        let mut dirs = vec![self.dir.join("components")];
        for t in self.manifest.tasks.keys() {
            dirs.push(self.task_dir(t).join("best"));
            dirs.push(self.task_dir(t).join("iter"));
        }
        for dir in dirs {
            let Ok(entries) = fs::read_dir(&dir) else {
                continue;
            };
            for entry in entries {
                let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                let remove = if is_temp(&name) {
                    report.temp_files_removed += 1;
                    true
                } else if let Some(id) = name
                    .strip_suffix(".bin")
                    .and_then(|s| ComponentId::parse(s).ok())
                {
                    let orphan = !keep.contains(&id);
                    report.components_removed += orphan as usize;
                    orphan
                } else {
                    false
                };
                if remove {
                    fs::remove_file(entry.path()).map_err(|e| StoreError::io(&entry.path(), e))?;
                }
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub components: usize,
    pub best_records: usize,
    pub temp_files: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GcReport {
    pub best_versions_removed: usize,
    pub components_removed: usize,
    pub temp_files_removed: usize,
}

/// Hash of every non-temp file under `dir` (relative path and content), in
/// path order. Two stores with equal digests are byte-identical.
pub fn tree_digest(dir: &Path) -> Result<String, StoreError> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), StoreError> {
        for entry in fs::read_dir(dir).map_err(|e| StoreError::io(dir, e))? {
            let entry = entry.map_err(|e| StoreError::io(dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_temp(&name) {
                continue;
            }
            let path = entry.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else {
                let rel = path.strip_prefix(root).expect("walk stays under root");
                out.push((rel.to_string_lossy().replace('\\', "/"), path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for (rel, path) in files {
        let bytes = read_file(&path)?;
        h.update((rel.len() as u64).to_le_bytes());
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}
