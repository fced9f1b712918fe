//! The per-task agent: generations of sampled, mutated and trained children,
//! reward-based retention of the task's best path, and publication to the
//! shared store between barriers.

use std::collections::BTreeSet;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    candidate_accounted_parameters, component_flops, inference_flops, AgentId, ComponentLookup,
    ComponentMap, GraphError, ModelPath, Overlay, SystemState, TaskId, TaskInfo,
};
use crate::mutation::{
    apply_mutations, sample_mutations, sample_parent, update_mu, MutationAction, MutationConfig,
    MutationError,
};
use crate::nn::{evaluate, train_child, NnError, TrainBudget};
use crate::rng::Seed;
use crate::store::{with_retry, Store, StoreError};
use crate::tasks::TaskData;

/// Cost ratios above this are clamped in the reward.
pub const COST_CLAMP: f64 = 0.5;
const STORE_ATTEMPTS: u32 = 5;
const CONFLICT_ATTEMPTS: u32 = 8;

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("invalid reward input: {0}")]
    InvalidReward(String),
    #[error("invalid agent config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Mutation(#[from] MutationError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("event log {path}: {source}")]
    EventLog {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostNorms {
    pub params_norm: f64,
    pub flops_norm: f64,
}

impl CostNorms {
    /// Parameter count and flops of a system where every task holds a
    /// private copy of the root stack topped with a head shaped by `info`.
    pub fn from_root(state: &SystemState, info: TaskInfo) -> Result<Self, GraphError> {
        let stride = state.root.hyperparams.input_resolution.stride();
        let (mut params, mut flops, mut width) = (0.0, 0.0, 0);
        for id in &state.root.component_ids {
            let c = state.require(id)?;
            params += c.param_count() as f64;
            flops += component_flops(c, stride);
            width = c.out_dim();
        }
        let (w, k) = (width as f64, info.n_classes as f64);
        let tasks = state.tasks.len().max(1) as f64;
        Ok(CostNorms {
            params_norm: tasks * (params + w * k + k),
            flops_norm: tasks * (flops + 2.0 * w * k),
        })
    }
}

/// Accuracy discounted by clamped parameter and flop cost ratios.
pub fn reward(
    val_accuracy: f64,
    acc_params: f64,
    flops: f64,
    norms: CostNorms,
    scale: f64,
) -> Result<f64, EvolutionError> {
    for (name, v) in [
        ("val_accuracy", val_accuracy),
        ("acc_params", acc_params),
        ("flops", flops),
        ("params_norm", norms.params_norm),
        ("flops_norm", norms.flops_norm),
        ("scale", scale),
    ] {
        if !v.is_finite() {
            return Err(EvolutionError::InvalidReward(format!("{name} is {v}")));
        }
    }
    if norms.params_norm <= 0.0 || norms.flops_norm <= 0.0 {
        return Err(EvolutionError::InvalidReward(
            "cost norms must be positive".into(),
        ));
    }
    let size = 1.0 - scale * (acc_params / norms.params_norm).min(COST_CLAMP);
    let compute = 1.0 - scale * (flops / norms.flops_norm).min(COST_CLAMP);
    Ok(val_accuracy * size * compute)
}

/// Which published bests an agent's image contains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageView {
    /// Every task's current best.
    #[default]
    Latest,
    /// Bests published before the current iteration only, so the image does
    /// not depend on how fast other agents run.
    Barrier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub task_id: TaskId,
    pub generations_per_iteration: u32,
    pub samples_per_generation: u32,
    pub budget: TrainBudget,
    pub cost_scale: f64,
    pub rng_seed: u64,
    /// Threads used to train one generation's children concurrently.
    pub worker_threads: usize,
    pub mutation: MutationConfig,
    pub barrier_timeout_ms: u64,
    #[serde(default)]
    pub image_view: ImageView,
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), EvolutionError> {
        let bad = |m: &str| Err(EvolutionError::InvalidConfig(m.into()));
        if self.generations_per_iteration == 0 || self.samples_per_generation == 0 {
            return bad("generations and samples per generation must be positive");
        }
        if self.budget.epochs == 0 || self.budget.samples_cap == 0 {
            return bad("budget epochs and samples cap must be positive");
        }
        if !(self.cost_scale >= 0.0 && self.cost_scale.is_finite()) {
            return bad("cost scale must be a finite non-negative number");
        }
        if self.worker_threads == 0 {
            return bad("worker_threads must be positive");
        }
        self.mutation
            .validate()
            .map_err(EvolutionError::InvalidConfig)
    }

    pub fn agent_id(&self) -> AgentId {
        AgentId::new(self.task_id.as_str()).expect("task ids are valid agent ids")
    }
}

/// A trained, scored child with its unpublished components.
#[derive(Debug, Clone)]
pub struct ScoredChild {
    pub sample_index: u32,
    pub path: ModelPath,
    pub local: ComponentMap,
    pub applied: Vec<MutationAction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationResult {
    pub iteration: u64,
    pub best_changed: bool,
    pub best_score: f64,
    pub wall_time_s: f64,
    pub conflicts: u32,
    pub failed_children: u32,
}

/// One agent: configuration, its task's data and a training thread pool.
pub struct Agent<'a> {
    pub config: AgentConfig,
    data: &'a TaskData,
    pool: rayon::ThreadPool,
}

impl<'a> Agent<'a> {
    pub fn new(config: AgentConfig, data: &'a TaskData) -> Result<Self, EvolutionError> {
        config.validate()?;
        if data.id() != &config.task_id {
            return Err(EvolutionError::InvalidConfig(format!(
                "data for {} given to agent for {}",
                data.id(),
                config.task_id
            )));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.worker_threads)
            .build()
            .map_err(|e| EvolutionError::InvalidConfig(e.to_string()))?;
        Ok(Agent { config, data, pool })
    }

    pub fn task_id(&self) -> &TaskId {
        &self.config.task_id
    }

    fn child_seed(&self, iteration: u64, generation: u32, sample: u32) -> Seed {
        Seed::new(self.config.rng_seed)
            .with_str(self.config.task_id.as_str())
            .with(iteration)
            .with(generation as u64)
            .with(sample as u64)
    }

    fn make_child(
        &self,
        image: &SystemState,
        norms: CostNorms,
        iteration: u64,
        generation: u32,
        sample: u32,
    ) -> Result<ScoredChild, EvolutionError> {
        let cfg = &self.config;
        let seed = self.child_seed(iteration, generation, sample);
        let mut rng = seed.rng();
        let parent = sample_parent(image, &cfg.task_id, &cfg.mutation, &mut rng)?;
        let actions = {
            let lookup = Overlay {
                base: image,
                local: &parent.local,
            };
            sample_mutations(&parent.path, image, &lookup, &cfg.mutation, &mut rng)
        };
        let child = apply_mutations(parent, &actions, image, &cfg.mutation, &mut rng)?;
        let lookup = Overlay {
            base: image,
            local: &child.local,
        };
        let outcome = train_child(
            &child.path,
            &child.unfrozen,
            &lookup,
            &self.data.train,
            cfg.budget,
            seed.with_str("train"),
        )?;
        let mut path = outcome.apply_to(&child.path);
        let mut local = ComponentMap::new();
        for (_, c) in outcome.new_components {
            local.insert(c.id().clone(), Arc::new(c));
        }
        for (id, c) in &child.local {
            local.entry(id.clone()).or_insert_with(|| c.clone());
        }
        let used: BTreeSet<_> = path.all_ids().cloned().collect();
        local.retain(|id, _| used.contains(id));
        let lookup = Overlay {
            base: image,
            local: &local,
        };
        path.val_accuracy = evaluate(&path, &lookup, &self.data.val)?;
        path.test_accuracy = evaluate(&path, &lookup, &self.data.test)?;
        let params = candidate_accounted_parameters(&path, image, &lookup)?;
        let flops = inference_flops(&path, &lookup)?;
        path.score = reward(path.val_accuracy, params, flops, norms, cfg.cost_scale)?;
        path.generation_born = iteration * cfg.generations_per_iteration as u64 + generation as u64;
        Ok(ScoredChild {
            sample_index: sample,
            path,
            local,
            applied: child.applied,
        })
    }

    /// Sample, mutate, train and score one generation of children. Failed
    /// children are dropped. The result is sorted by descending score, ties
    /// broken by sample index, independent of thread scheduling.
    pub fn run_generation(
        &self,
        image: &SystemState,
        iteration: u64,
        generation: u32,
    ) -> Result<(Vec<ScoredChild>, u32), EvolutionError> {
        let info = *image
            .tasks
            .get(&self.config.task_id)
            .ok_or_else(|| MutationError::UnknownTask(self.config.task_id.clone()))?;
        let norms = CostNorms::from_root(image, info)?;
        let results: Vec<Result<ScoredChild, EvolutionError>> = self.pool.install(|| {
            (0..self.config.samples_per_generation)
                .into_par_iter()
                .map(|s| self.make_child(image, norms, iteration, generation, s))
                .collect()
        });
        let mut failed = 0;
        let mut children = Vec::with_capacity(results.len());
        for r in results {
            match r {
                Ok(c) => children.push(c),
                Err(EvolutionError::Nn(_))
                | Err(EvolutionError::Mutation(MutationError::IllegalMutation { .. })) => {
                    failed += 1
                }
                Err(e) => return Err(e),
            }
        }
        children.sort_by(|a, b| {
            b.path
                .score
                .total_cmp(&a.path.score)
                .then(a.sample_index.cmp(&b.sample_index))
        });
        Ok((children, failed))
    }

    /// Load a fresh image, hill-climb for the configured generations and
    /// publish the task's best if it improved.
    pub fn run_task_iteration(
        &self,
        store: &Store,
        iteration: u64,
    ) -> Result<IterationResult, EvolutionError> {
        let start = Instant::now();
        let task = self.config.task_id.clone();
        let loaded = with_retry(STORE_ATTEMPTS, || match self.config.image_view {
            ImageView::Latest => store.load_system_image(),
            ImageView::Barrier => store.load_system_image_before(iteration),
        })?;
        let mut image = loaded.clone();
        let initial = loaded.bests.get(&task).cloned();
        let mut failed = 0;
        let mut improved = false;
        for g in 0..self.config.generations_per_iteration {
            let (children, f) = self.run_generation(&image, iteration, g)?;
            failed += f;
            let Some(mut winner) = children.into_iter().next() else {
                continue;
            };
            let current = image
                .bests
                .get(&task)
                .map_or(f64::NEG_INFINITY, |p| p.score);
            if winner.path.score > current {
                winner.path.mu = update_mu(
                    &winner.path.mu,
                    &winner.applied,
                    true,
                    &self.config.mutation,
                );
                for c in winner.local.values() {
                    image.insert_component(c.clone());
                }
                image.bests.insert(task.clone(), winner.path);
                improved = true;
            }
        }
        let mut conflicts = 0;
        let mut changed = false;
        if improved {
            let best = image.bests[&task].clone();
            for id in best.all_ids() {
                if !store.has_component(id) {
                    let c = image.require(id)?;
                    with_retry(STORE_ATTEMPTS, || store.publish_component(c))?;
                }
            }
            let mut expected = initial.as_ref().map(|p| p.fingerprint());
            loop {
                match store.publish_best(&best, iteration, expected.as_deref()) {
                    Ok(_) => {
                        changed = true;
                        break;
                    }
                    Err(StoreError::Conflict { .. }) if conflicts < CONFLICT_ATTEMPTS => {
                        conflicts += 1;
                        let current = with_retry(STORE_ATTEMPTS, || store.current_best(&task))?;
                        match current {
                            Some((_, rec)) if rec.path.score >= best.score => break,
                            other => expected = other.map(|(_, r)| r.path.fingerprint()),
                        }
                    }
                    Err(e) if e.is_transient() && conflicts < CONFLICT_ATTEMPTS => conflicts += 1,
                    Err(e) => return Err(e.into()),
                }
            }
        }
        let best_score = if changed {
            image.bests[&task].score
        } else {
            with_retry(STORE_ATTEMPTS, || store.current_best(&task))?
                .map_or(f64::NEG_INFINITY, |(_, r)| r.path.score)
        };
        Ok(IterationResult {
            iteration,
            best_changed: changed,
            best_score,
            wall_time_s: start.elapsed().as_secs_f64(),
            conflicts,
            failed_children: failed,
        })
    }

    /// Barrier-synchronized loop over iterations, resuming after the last
    /// completed one.
    pub fn run_agent(
        &self,
        store: &Store,
        num_iterations: u64,
        events: Option<&EventLog>,
    ) -> Result<Vec<IterationResult>, EvolutionError> {
        let agent = self.config.agent_id();
        let timeout = Duration::from_millis(self.config.barrier_timeout_ms);
        let mut out = Vec::new();
        for n in store.progress(&agent)?..num_iterations {
            store.wait_for_barrier(n, timeout)?;
            out.push(self.step(store, n, events)?);
        }
        Ok(out)
    }

    /// One logged task iteration followed by its completion marker. The
    /// caller is responsible for the barrier.
    pub fn step(
        &self,
        store: &Store,
        n: u64,
        events: Option<&EventLog>,
    ) -> Result<IterationResult, EvolutionError> {
        let agent = self.config.agent_id();
        if let Some(log) = events {
            log.record(EventKind::Start, &agent, n)?;
        }
        let result = self.run_task_iteration(store, n)?;
        if let Some(log) = events {
            log.record(EventKind::Complete, &agent, n)?;
        }
        with_retry(STORE_ATTEMPTS, || {
            match store.mark_iteration_complete(&agent, n) {
                Err(StoreError::DuplicateMarker { .. }) if store.marker_exists(&agent, n) => Ok(()),
                other => other,
            }
        })?;
        Ok(result)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Start,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub event: EventKind,
    pub agent: AgentId,
    pub iteration: u64,
    pub unix_ns: u128,
}

/// Append-only JSON-lines log of iteration start and completion events.
pub struct EventLog {
    path: String,
    file: Mutex<File>,
}

impl EventLog {
    pub fn open(path: &Path) -> Result<Self, EvolutionError> {
        let name = path.display().to_string();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|source| EvolutionError::EventLog {
                path: name.clone(),
                source,
            })?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| EvolutionError::EventLog {
                path: name.clone(),
                source,
            })?;
        Ok(EventLog {
            path: name,
            file: Mutex::new(file),
        })
    }

    pub fn record(
        &self,
        event: EventKind,
        agent: &AgentId,
        iteration: u64,
    ) -> Result<(), EvolutionError> {
        let unix_ns = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let mut line = serde_json::to_string(&Event {
            event,
            agent: agent.clone(),
            iteration,
            unix_ns,
        })
        .expect("events serialize");
        line.push('\n');
        let mut f = self.file.lock().expect("event log lock");
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|source| EvolutionError::EventLog {
                path: self.path.clone(),
                source,
            })
    }

    pub fn read(path: &Path) -> Result<Vec<Event>, EvolutionError> {
        let name = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| EvolutionError::EventLog {
            path: name.clone(),
            source,
        })?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| EvolutionError::EventLog {
                    path: name.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
                })
            })
            .collect()
    }
}

/// Pairs `(late, early)` where `late` started iteration n before `early`
/// completed iteration n - 1. Empty for a correct barrier.
pub fn barrier_violations(events: &[Event]) -> Vec<(Event, Event)> {
    let mut out = Vec::new();
    for s in events
        .iter()
        .filter(|e| e.event == EventKind::Start && e.iteration > 0)
    {
        for c in events
            .iter()
            .filter(|e| e.event == EventKind::Complete && e.iteration == s.iteration - 1)
        {
            if s.unix_ns < c.unix_ns {
                out.push((s.clone(), c.clone()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const NORMS: CostNorms = CostNorms {
        params_norm: 100.0,
        flops_norm: 1000.0,
    };

    #[test]
    fn reward_without_cost_is_accuracy() {
        assert_eq!(reward(0.9, 5e6, 7e9, NORMS, 0.0).unwrap(), 0.9);
    }

    #[test]
    fn reward_direct_evaluation() {
        let r = reward(0.9, 10.0, 50.0, NORMS, 1.0).unwrap();
        assert!((r - 0.9 * 0.9 * 0.95).abs() < 1e-12);
    }

    #[test]
    fn reward_clamps_large_costs() {
        let r = reward(1.0, 1000.0, 0.0, NORMS, 1.0).unwrap();
        assert_eq!(r, 0.5);
    }

    #[test]
    fn reward_rejects_non_finite() {
        assert!(matches!(
            reward(f64::NAN, 1.0, 1.0, NORMS, 1.0),
            Err(EvolutionError::InvalidReward(_))
        ));
        assert!(matches!(
            reward(0.5, f64::INFINITY, 1.0, NORMS, 1.0),
            Err(EvolutionError::InvalidReward(_))
        ));
        let zero = CostNorms {
            params_norm: 0.0,
            flops_norm: 1.0,
        };
        assert!(reward(0.5, 1.0, 1.0, zero, 1.0).is_err());
    }

    #[test]
    fn barrier_checker_flags_early_start() {
        let a = AgentId::new("a").unwrap();
        let b = AgentId::new("b").unwrap();
        let ev = |event, agent: &AgentId, iteration, unix_ns| Event {
            event,
            agent: agent.clone(),
            iteration,
            unix_ns,
        };
        let ok = vec![
            ev(EventKind::Complete, &a, 0, 10),
            ev(EventKind::Complete, &b, 0, 20),
            ev(EventKind::Start, &a, 1, 21),
        ];
        assert!(barrier_violations(&ok).is_empty());
        let bad = vec![
            ev(EventKind::Complete, &a, 0, 10),
            ev(EventKind::Start, &a, 1, 15),
            ev(EventKind::Complete, &b, 0, 20),
        ];
        assert_eq!(barrier_violations(&bad).len(), 1);
    }
}
