//! Experiment configuration and the sequential and multiagent drivers.
//!
//! A run directory holds:
//!
//! ```text
//! config.json            the experiment config of this repetition
//! store/                 the shared system state
//! events/<agent>.jsonl   start/complete events per task iteration
//! timings/<agent>.json   per-iteration results of each agent
//! record.json            run summary written when the run finishes
//! ```

pub mod metrics;
pub mod report;
pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical;
use crate::evolution::{Agent, AgentConfig, EventLog, EvolutionError, ImageView, IterationResult};
use crate::graph::{
    AgentId, Component, ComponentKind, LayerBounds, RootModel, SearchSpace, TaskId,
};
use crate::mutation::MutationConfig;
use crate::nn::{init_affine, TrainBudget};
use crate::rng::Seed;
use crate::store::{Manifest, Store, StoreError, FORMAT_VERSION};
use crate::tasks::{generate_family, load_csv_task, CsvTask, FamilySpec, TaskData, TaskError};

#[derive(Debug, Error)]
pub enum CoordinatorError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Evolution(#[from] EvolutionError),
    #[error("agent {agent} failed ({status}): {stderr}")]
    AgentFailed {
        agent: AgentId,
        status: String,
        stderr: String,
    },
    #[error("report error: {0}")]
    Report(String),
}

impl CoordinatorError {
    /// Short machine-readable error kind.
    pub fn kind(&self) -> &'static str {
        match self {
            CoordinatorError::Config(_) => "InvalidConfig",
            CoordinatorError::Io { .. } => "Io",
            CoordinatorError::Json { .. } => "Json",
            CoordinatorError::Task(_) => "InvalidSpec",
            CoordinatorError::Store(e) | CoordinatorError::Evolution(EvolutionError::Store(e)) => {
                store_error_kind(e)
            }
            CoordinatorError::Evolution(EvolutionError::InvalidReward(_)) => "InvalidReward",
            CoordinatorError::Evolution(_) => "EvolutionError",
            CoordinatorError::AgentFailed { .. } => "AgentFailed",
            CoordinatorError::Report(_) => "ReportError",
        }
    }
}

pub fn store_error_kind(e: &StoreError) -> &'static str {
    match e {
        StoreError::Io { .. } => "StoreIo",
        StoreError::IntegrityViolation { .. } => "IntegrityViolation",
        StoreError::DanglingComponent(_) => "DanglingComponent",
        StoreError::Conflict { .. } => "Conflict",
        StoreError::DuplicateMarker { .. } => "DuplicateMarker",
        StoreError::BarrierTimeout { .. } => "BarrierTimeout",
        StoreError::NotInitialized(_) => "NotInitialized",
        _ => "StoreError",
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoordinatorError + '_ {
    move |source| CoordinatorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(
    path: &Path,
) -> Result<T, CoordinatorError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| CoordinatorError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CoordinatorError> {
    let mut bytes = canonical::to_vec(value).map_err(|source| CoordinatorError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Sequential,
    Multiagent,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Sequential => "sequential",
            Mode::Multiagent => "multiagent",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSource {
    Synthetic(FamilySpec),
    /// CSV paths are resolved against `base_dir` (the config file's
    /// directory when unset).
    Csv {
        tasks: Vec<CsvTask>,
        base_dir: Option<String>,
    },
}

/// Shape of the seeded root stack: embedding, then `blocks` dense layers,
/// each followed by a tanh.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RootSpec {
    pub hidden: u32,
    pub blocks: u32,
}

/// Per-agent settings shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentTemplate {
    pub generations_per_iteration: u32,
    pub samples_per_generation: u32,
    pub epochs: u32,
    pub samples_cap: u32,
    pub cost_scale: f64,
    pub worker_threads: usize,
    pub mutation: MutationConfig,
    pub barrier_timeout_ms: u64,
}

impl Default for AgentTemplate {
    fn default() -> Self {
        AgentTemplate {
            generations_per_iteration: 4,
            samples_per_generation: 8,
            epochs: 2,
            samples_cap: 256,
            cost_scale: 1.0,
            worker_threads: 1,
            mutation: MutationConfig::default(),
            barrier_timeout_ms: 600_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub tasks: TaskSource,
    pub root: RootSpec,
    pub layer_bounds: LayerBounds,
    #[serde(default)]
    pub search_space: SearchSpace,
    #[serde(default)]
    pub agent: AgentTemplate,
    pub iterations: u64,
    #[serde(default = "one")]
    pub repetitions: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub equal_budget: bool,
    /// Task order in sequential mode; declaration order when unset.
    #[serde(default)]
    pub task_order: Option<Vec<TaskId>>,
}

fn one() -> u32 {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tasks: TaskSource::Synthetic(FamilySpec::default()),
            root: RootSpec {
                hidden: 16,
                blocks: 1,
            },
            layer_bounds: LayerBounds {
                min_layers: 2,
                max_layers: 8,
            },
            search_space: SearchSpace::default(),
            agent: AgentTemplate::default(),
            iterations: 10,
            repetitions: 1,
            seed: 0,
            equal_budget: false,
            task_order: None,
        }
    }
}

impl ExperimentConfig {
    /// Read a config file, resolving relative CSV paths against its directory.
    pub fn load(path: &Path) -> Result<Self, CoordinatorError> {
        let mut cfg: ExperimentConfig = read_json(path)?;
        if let TaskSource::Csv { base_dir, .. } = &mut cfg.tasks {
            if base_dir.is_none() {
                let dir = path.parent().unwrap_or(Path::new("."));
                let abs = fs::canonicalize(dir).map_err(io_err(dir))?;
                *base_dir = Some(abs.display().to_string());
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CoordinatorError> {
        let bad = |m: &str| Err(CoordinatorError::Config(m.into()));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1");
        }
        if self.root.hidden == 0 {
            return bad("root hidden width must be positive");
        }
        let root_len = 2 + 2 * self.root.blocks as usize;
        let b = self.layer_bounds;
        if b.min_layers < 2
            || b.min_layers > b.max_layers
            || !(b.min_layers..=b.max_layers).contains(&root_len)
        {
            return bad("layer bounds must satisfy 2 <= min <= root length <= max");
        }
        self.search_space
            .validate()
            .map_err(CoordinatorError::Config)?;
        self.agent_config(TaskId::new("probe").unwrap(), 0, ImageView::Latest)
            .validate()?;
        Ok(())
    }

    pub fn load_tasks(&self) -> Result<Vec<TaskData>, CoordinatorError> {
        let tasks = match &self.tasks {
            TaskSource::Synthetic(spec) => generate_family(spec)?,
            TaskSource::Csv { tasks, base_dir } => {
                let base = PathBuf::from(base_dir.clone().unwrap_or_else(|| ".".into()));
                tasks
                    .iter()
                    .map(|t| load_csv_task(t, &base))
                    .collect::<Result<Vec<_>, _>>()?
            }
        };
        if tasks.is_empty() {
            return Err(CoordinatorError::Config("no tasks".into()));
        }
        let d = tasks[0].spec.input_dim;
        if tasks.iter().any(|t| t.spec.input_dim != d) {
            return Err(CoordinatorError::Config(
                "all tasks must share one input dimension".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        if !tasks.iter().all(|t| seen.insert(t.id().clone())) {
            return Err(CoordinatorError::Config("duplicate task ids".into()));
        }
        Ok(tasks)
    }

    /// Tasks in sequential execution order.
    pub fn ordered_ids(&self, tasks: &[TaskData]) -> Result<Vec<TaskId>, CoordinatorError> {
        let declared: Vec<TaskId> = tasks.iter().map(|t| t.id().clone()).collect();
        match &self.task_order {
            None => Ok(declared),
            Some(order) => {
                let mut a = order.clone();
                let mut b = declared.clone();
                a.sort();
                b.sort();
                if a != b {
                    return Err(CoordinatorError::Config(
                        "task_order must be a permutation of the task ids".into(),
                    ));
                }
                Ok(order.clone())
            }
        }
    }

    pub fn budget(&self) -> TrainBudget {
        TrainBudget {
            epochs: self.agent.epochs,
            samples_cap: self.agent.samples_cap,
            fixed_samples: self.equal_budget,
        }
    }

    pub fn agent_config(&self, task_id: TaskId, seed: u64, image_view: ImageView) -> AgentConfig {
        let t = &self.agent;
        AgentConfig {
            task_id,
            generations_per_iteration: t.generations_per_iteration,
            samples_per_generation: t.samples_per_generation,
            budget: self.budget(),
            cost_scale: t.cost_scale,
            rng_seed: seed,
            worker_threads: t.worker_threads,
            mutation: t.mutation.clone(),
            barrier_timeout_ms: t.barrier_timeout_ms,
            image_view,
        }
    }
}

/// The seeded root stack for tasks with `input_dim` features.
pub fn build_root(spec: RootSpec, input_dim: u32, seed: u64) -> Vec<Component> {
    let mut rng = Seed::new(seed).with_str("root").rng();
    let h = spec.hidden;
    let mut out = Vec::new();
    let embed = Component::new(
        ComponentKind::EmbeddingStub,
        input_dim,
        h,
        init_affine(input_dim, h, &mut rng),
        None,
        0,
    )
    .expect("glorot init is finite");
    out.push(embed);
    out.push(Component::activation(h, 1));
    for b in 0..spec.blocks {
        let depth = 2 + 2 * b;
        out.push(
            Component::new(
                ComponentKind::Dense,
                h,
                h,
                init_affine(h, h, &mut rng),
                None,
                depth,
            )
            .expect("glorot init is finite"),
        );
        out.push(Component::activation(h, depth + 1));
    }
    out
}

/// Summary of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: Mode,
    pub processes: bool,
    pub seed: u64,
    pub iterations: u64,
    pub tasks: Vec<TaskId>,
    /// Training sample passes per child for each task.
    pub budgets: BTreeMap<TaskId, u64>,
    pub equal_budget: bool,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub processes: bool,
    /// Executable providing the `agent` subcommand in process mode.
    pub agent_exe: Option<PathBuf>,
}

pub fn store_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("store")
}

fn events_path(run_dir: &Path, agent: &AgentId) -> PathBuf {
    run_dir.join("events").join(format!("{agent}.jsonl"))
}

fn timings_path(run_dir: &Path, agent: &AgentId) -> PathBuf {
    run_dir.join("timings").join(format!("{agent}.json"))
}

/// Write the config and initialize the store of a run directory.
pub fn prepare_run(
    cfg: &ExperimentConfig,
    run_dir: &Path,
) -> Result<(Vec<TaskData>, Store), CoordinatorError> {
    cfg.validate()?;
    let tasks = cfg.load_tasks()?;
    let order = cfg.ordered_ids(&tasks)?;
    fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
    write_json(&run_dir.join("config.json"), cfg)?;
    let root = build_root(cfg.root, tasks[0].spec.input_dim, cfg.seed);
    let manifest = Manifest {
        format: FORMAT_VERSION,
        root: RootModel {
            component_ids: root.iter().map(|c| c.id().clone()).collect(),
            hyperparams: cfg.search_space.midpoint(),
        },
        tasks: tasks
            .iter()
            .map(|t| (t.id().clone(), t.spec.info()))
            .collect(),
        agents: order
            .iter()
            .map(|t| AgentId::new(t.as_str()).expect("task ids are agent ids"))
            .collect(),
        layer_bounds: cfg.layer_bounds,
        search_space: cfg.search_space.clone(),
    };
    let store = Store::init(&store_dir(run_dir), manifest, &root)?;
    Ok((tasks, store))
}

fn finish(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    mode: Mode,
    processes: bool,
    tasks: &[TaskData],
    wall_time_s: f64,
) -> Result<RunRecord, CoordinatorError> {
    let budget = cfg.budget();
    let record = RunRecord {
        mode,
        processes,
        seed: cfg.seed,
        iterations: cfg.iterations,
        tasks: cfg.ordered_ids(tasks)?,
        budgets: tasks
            .iter()
            .map(|t| (t.id().clone(), budget.sample_passes(t.train.len())))
            .collect(),
        equal_budget: cfg.equal_budget,
        wall_time_s,
    };
    write_json(&run_dir.join("record.json"), &record)?;
    Ok(record)
}

fn save_timings(
    run_dir: &Path,
    agent: &AgentId,
    results: &[IterationResult],
) -> Result<(), CoordinatorError> {
    let path = timings_path(run_dir, agent);
    let mut all: Vec<IterationResult> = if path.exists() {
        read_json(&path)?
    } else {
        Vec::new()
    };
    all.extend_from_slice(results);
    write_json(&path, &all)
}

pub fn load_timings(
    run_dir: &Path,
    agent: &AgentId,
) -> Result<Vec<IterationResult>, CoordinatorError> {
    read_json(&timings_path(run_dir, agent))
}

/// One program iterating over all tasks in a fixed order.
pub fn run_sequential(
    cfg: &ExperimentConfig,
    run_dir: &Path,
) -> Result<RunRecord, CoordinatorError> {
    let start = std::time::Instant::now();
    let (tasks, store) = prepare_run(cfg, run_dir)?;
    let order = cfg.ordered_ids(&tasks)?;
    let by_id: BTreeMap<&TaskId, &TaskData> = tasks.iter().map(|t| (t.id(), t)).collect();
    let mut agents = Vec::new();
    for id in &order {
        let agent = Agent::new(
            cfg.agent_config(id.clone(), cfg.seed, ImageView::Latest),
            by_id[id],
        )?;
        let log = EventLog::open(&events_path(run_dir, &agent.config.agent_id()))?;
        agents.push((agent, log, Vec::new()));
    }
    let timeout = std::time::Duration::from_millis(cfg.agent.barrier_timeout_ms);
    let resume = agents
        .iter()
        .map(|(a, _, _)| store.progress(&a.config.agent_id()))
        .collect::<Result<Vec<_>, _>>()?;
    for n in resume.into_iter().min().unwrap_or(0)..cfg.iterations {
        for (agent, log, results) in agents.iter_mut() {
            if store.marker_exists(&agent.config.agent_id(), n) {
                continue;
            }
            store.wait_for_barrier(n, timeout)?;
            results.push(agent.step(&store, n, Some(log))?);
        }
    }
    for (agent, _, results) in &agents {
        save_timings(run_dir, &agent.config.agent_id(), results)?;
    }
    finish(
        cfg,
        run_dir,
        Mode::Sequential,
        false,
        &tasks,
        start.elapsed().as_secs_f64(),
    )
}

/// Run a single agent against an initialized run directory. This is what
/// each worker process executes in process mode.
pub fn run_single_agent(
    run_dir: &Path,
    agent_id: &AgentId,
) -> Result<Vec<IterationResult>, CoordinatorError> {
    let cfg: ExperimentConfig = read_json(&run_dir.join("config.json"))?;
    let tasks = cfg.load_tasks()?;
    let data = tasks
        .iter()
        .find(|t| t.id().as_str() == agent_id.as_str())
        .ok_or_else(|| CoordinatorError::Config(format!("no task for agent {agent_id}")))?;
    let store = Store::open(&store_dir(run_dir))?;
    let agent = Agent::new(
        cfg.agent_config(data.id().clone(), cfg.seed, ImageView::Barrier),
        data,
    )?;
    let log = EventLog::open(&events_path(run_dir, agent_id))?;
    let results = agent.run_agent(&store, cfg.iterations, Some(&log))?;
    save_timings(run_dir, agent_id, &results)?;
    Ok(results)
}

/// One agent per task, as threads of this process or as separate processes.
pub fn run_multiagent(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunRecord, CoordinatorError> {
    let start = std::time::Instant::now();
    let (tasks, store) = prepare_run(cfg, run_dir)?;
    let agents = store.manifest().agents.clone();
    drop(store);
    if opts.processes {
        let exe = opts.agent_exe.clone().ok_or_else(|| {
            CoordinatorError::Config("process mode needs an agent executable".into())
        })?;
        let mut children = Vec::new();
        for a in &agents {
            let child = Command::new(&exe)
                .arg("agent")
                .arg("--run-dir")
                .arg(run_dir)
                .arg("--agent-id")
                .arg(a.as_str())
                .stdout(Stdio::null())
                .stderr(Stdio::piped())
                .spawn()
                .map_err(io_err(&exe))?;
            children.push((a.clone(), child));
        }
        let mut failure = None;
        for (a, child) in children {
            let out = child.wait_with_output().map_err(io_err(&exe))?;
            if !out.status.success() && failure.is_none() {
                failure = Some(CoordinatorError::AgentFailed {
                    agent: a,
                    status: out.status.to_string(),
                    stderr: String::from_utf8_lossy(&out.stderr).trim().to_string(),
                });
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
    } else {
        let (tx, rx) = mpsc::channel();
        std::thread::scope(|s| {
            for a in &agents {
                let tx = tx.clone();
                s.spawn(move || {
                    let _ = tx.send((a.clone(), run_single_agent(run_dir, a)));
                });
            }
        });
        drop(tx);
        let mut results: Vec<_> = rx.into_iter().collect();
        results.sort_by(|a, b| a.0.cmp(&b.0));
        for (_, r) in results {
            r?;
        }
    }
    finish(
        cfg,
        run_dir,
        Mode::Multiagent,
        opts.processes,
        &tasks,
        start.elapsed().as_secs_f64(),
    )
}

pub fn run(
    cfg: &ExperimentConfig,
    mode: Mode,
    run_dir: &Path,
    opts: &RunOptions,
) -> Result<RunRecord, CoordinatorError> {
    match mode {
        Mode::Sequential => run_sequential(cfg, run_dir),
        Mode::Multiagent => run_multiagent(cfg, run_dir, opts),
    }
}

/// Run every repetition into `<base>/rep-<r>`, with seed `cfg.seed + r`.
pub fn run_repetitions(
    cfg: &ExperimentConfig,
    mode: Mode,
    base: &Path,
    opts: &RunOptions,
) -> Result<Vec<(PathBuf, RunRecord)>, CoordinatorError> {
    let mut out = Vec::new();
    for r in 0..cfg.repetitions {
        let mut rep = cfg.clone();
        rep.seed = cfg.seed + r as u64;
        rep.repetitions = 1;
        let dir = base.join(format!("rep-{r}"));
        let record = run(&rep, mode, &dir, opts)?;
        out.push((dir, record));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn root_shape_and_determinism() {
        let spec = RootSpec {
            hidden: 4,
            blocks: 2,
        };
        let a = build_root(spec, 3, 7);
        assert_eq!(a.len(), 6);
        assert_eq!(a, build_root(spec, 3, 7));
        assert_ne!(a[0].id(), build_root(spec, 3, 8)[0].id());
        let depths: Vec<u32> = a.iter().map(|c| c.depth_hint()).collect();
        assert_eq!(depths, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ExperimentConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.repetitions = 0;
        assert!(matches!(cfg.validate(), Err(CoordinatorError::Config(_))));
        let mut cfg = ExperimentConfig::default();
        cfg.layer_bounds.max_layers = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = canonical::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
