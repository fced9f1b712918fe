//! Fixtures shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;

use coevo::coordinator::{
    build_root, store_dir, ExperimentConfig, RootSpec, RunOptions, TaskSource,
};
use coevo::evolution::{Agent, ImageView};
use coevo::graph::{
    Component, ComponentKind, ComponentMap, InputResolution, LayerBounds, ModelPath, MuTable,
    SearchSpace, SystemState, TaskId, TaskInfo,
};
use coevo::nn::{Batch, Network, Slot};
use coevo::rng::Seed;
use coevo::store::Store;
use coevo::tasks::{FamilySpec, SplitSizes, TaskData};

/// A small synthetic experiment that finishes in well under a second.
pub fn micro_config(n_tasks: usize, iterations: u64, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        tasks: TaskSource::Synthetic(FamilySpec {
            n_tasks,
            input_dim: 6,
            latent_dim: 4,
            n_classes: 3,
            sizes: SplitSizes {
                train: 96,
                val: 48,
                test: 48,
            },
            ..FamilySpec::default()
        }),
        root: RootSpec {
            hidden: 8,
            blocks: 1,
        },
        iterations,
        seed,
        ..ExperimentConfig::default()
    };
    cfg.agent.generations_per_iteration = 2;
    cfg.agent.samples_per_generation = 3;
    cfg.agent.epochs = 1;
    cfg.agent.samples_cap = 64;
    cfg
}

pub fn coevo_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_coevo"))
}

pub fn process_options() -> RunOptions {
    RunOptions {
        processes: true,
        agent_exe: Some(coevo_exe()),
    }
}

/// Random path of `hidden_layers` affine layers (embedding then dense), each
/// followed by tanh, plus a head, and a random batch for it.
pub fn random_network(
    seed: Seed,
    hidden_layers: usize,
    resolution: InputResolution,
) -> (ModelPath, ComponentMap, Batch) {
    let mut rng = seed.rng();
    let in_dim = rng.random_range(2..=6u32);
    let classes = rng.random_range(2..=4u32);
    let mut lookup = ComponentMap::new();
    let mut ids = Vec::new();
    let mut width = in_dim;
    for l in 0..hidden_layers {
        let out = rng.random_range(2..=6u32);
        let kind = if l == 0 {
            ComponentKind::EmbeddingStub
        } else {
            ComponentKind::Dense
        };
        let params = (0..width * out + out)
            .map(|_| rng.random_range(-1.0f32..1.0))
            .collect();
        let c = Component::new(kind, width, out, params, None, 2 * l as u32).unwrap();
        let a = Component::activation(out, 2 * l as u32 + 1);
        ids.push(c.id().clone());
        ids.push(a.id().clone());
        lookup.insert(c.id().clone(), Arc::new(c));
        lookup.insert(a.id().clone(), Arc::new(a));
        width = out;
    }
    let params = (0..width * classes + classes)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let head = Component::new(
        ComponentKind::Dense,
        width,
        classes,
        params,
        None,
        ids.len() as u32,
    )
    .unwrap();
    let mut hyperparams = SearchSpace::default().midpoint();
    hyperparams.input_resolution = resolution;
    let path = ModelPath {
        task_id: TaskId::new("g").unwrap(),
        component_ids: ids,
        head_id: head.id().clone(),
        hyperparams,
        mu: MuTable::default(),
        score: 0.0,
        val_accuracy: 0.0,
        test_accuracy: 0.0,
        generation_born: 0,
        parent_fingerprint: None,
    };
    lookup.insert(head.id().clone(), Arc::new(head));
    let rows = rng.random_range(3..=8usize);
    let batch = Batch {
        in_dim: in_dim as usize,
        inputs: (0..rows * in_dim as usize)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
        labels: (0..rows)
            .map(|_| rng.random_range(0..classes as usize))
            .collect(),
    };
    (path, lookup, batch)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradCheck {
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub paths: usize,
}

/// Denominator floor of the relative error, so coordinates with a true
/// gradient near zero are judged on absolute error.
pub const GRAD_FLOOR: f64 = 1e-3;
pub const GRAD_EPS: f64 = 1e-4;

/// Compare analytic gradients of random paths with central differences.
pub fn gradient_check(seed: u64, paths: usize, coords_per_path: usize) -> GradCheck {
    let mut out = GradCheck::default();
    for p in 0..paths {
        let s = Seed::new(seed).with(p as u64);
        let mut rng = s.with_str("pick").rng();
        let hidden = 1 + p % 3;
        let res = if p % 2 == 0 {
            InputResolution::High
        } else {
            InputResolution::Low
        };
        let (path, lookup, batch) = random_network(s, hidden, res);
        let net = Network::from_path(&path, &lookup).unwrap();
        let trainable: BTreeSet<usize> = (0..path.component_ids.len()).step_by(2).collect();
        let (_, grads) = net.loss_and_grads(&batch, &trainable).unwrap();
        let mut slots: Vec<(Slot, &Vec<f64>)> = grads
            .layers
            .iter()
            .map(|(l, g)| (Slot::Layer(*l), g))
            .collect();
        slots.push((Slot::Head, &grads.head));
        for _ in 0..coords_per_path {
            let (slot, g) = slots[rng.random_range(0..slots.len())];
            let i = rng.random_range(0..g.len());
            let mut plus = net.clone();
            plus.affine_mut(slot).unwrap().params[i] += GRAD_EPS;
            let mut minus = net.clone();
            minus.affine_mut(slot).unwrap().params[i] -= GRAD_EPS;
            let numeric =
                (plus.loss(&batch).unwrap() - minus.loss(&batch).unwrap()) / (2.0 * GRAD_EPS);
            let err = (g[i] - numeric).abs() / g[i].abs().max(numeric.abs()).max(GRAD_FLOOR);
            out.max_rel_err = out.max_rel_err.max(err);
            out.coordinates += 1;
        }
        out.paths += 1;
    }
    out
}

/// A system with `tasks` registered tasks and the root of `seed`; no bests.
pub fn empty_system(tasks: usize, seed: u64) -> SystemState {
    let root = build_root(
        RootSpec {
            hidden: 4,
            blocks: 1,
        },
        3,
        seed,
    );
    let space = SearchSpace::default();
    let mut state = SystemState {
        root: coevo::graph::RootModel {
            component_ids: root.iter().map(|c| c.id().clone()).collect(),
            hyperparams: space.midpoint(),
        },
        tasks: (0..tasks)
            .map(|i| {
                (
                    TaskId::new(format!("t{i}")).unwrap(),
                    TaskInfo {
                        input_dim: 3,
                        n_classes: 2,
                    },
                )
            })
            .collect(),
        bounds: LayerBounds {
            min_layers: 2,
            max_layers: 8,
        },
        search_space: space,
        bests: BTreeMap::new(),
        components: ComponentMap::new(),
        progress: BTreeMap::new(),
    };
    for c in root {
        state.insert_component(Arc::new(c));
    }
    state
}

/// Drive every agent of a prepared run in lockstep: iteration n of all
/// agents, then `after(n)`.
pub fn lockstep(
    cfg: &ExperimentConfig,
    tasks: &[TaskData],
    store: &Store,
    mut after: impl FnMut(u64),
) {
    let agents: Vec<Agent> = tasks
        .iter()
        .map(|t| {
            Agent::new(
                cfg.agent_config(t.id().clone(), cfg.seed, ImageView::Barrier),
                t,
            )
            .unwrap()
        })
        .collect();
    for n in 0..cfg.iterations {
        for a in &agents {
            store
                .wait_for_barrier(n, std::time::Duration::from_secs(5))
                .unwrap();
            a.step(store, n, None).unwrap();
        }
        after(n);
    }
}

pub fn open_store(run_dir: &Path) -> Store {
    Store::open(&store_dir(run_dir)).unwrap()
}

/// `text` with the named CSV column replaced by `*` on every data row.
pub fn mask_column(text: &str, column: &str) -> String {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let idx = header.split(',').position(|h| h == column);
    let mut out = vec![header.to_string()];
    for l in lines {
        let mut fields: Vec<&str> = l.split(',').collect();
        if let Some(i) = idx {
            if i < fields.len() {
                fields[i] = "*";
            }
        }
        out.push(fields.join(","));
    }
    out.join("\n") + "\n"
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForgettingAudit {
    pub evaluations: usize,
    pub mismatches: usize,
}

/// Run `cfg` in lockstep and, after every iteration, re-evaluate every best
/// ever published from hash-verified store components. Any accuracy that is
/// not bit-identical to the recorded one counts as a mismatch.
pub fn forgetting_audit(cfg: &ExperimentConfig, run_dir: &Path) -> ForgettingAudit {
    let (tasks, store) = coevo::coordinator::prepare_run(cfg, run_dir).unwrap();
    let by_id: BTreeMap<TaskId, &TaskData> = tasks.iter().map(|t| (t.id().clone(), t)).collect();
    let mut audit = ForgettingAudit::default();
    let mut first_seen: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    lockstep(cfg, &tasks, &store, |_| {
        let mut components = ComponentMap::new();
        for (task, data) in &by_id {
            for (_, rec) in store.best_history(task).unwrap() {
                for id in rec.path.all_ids() {
                    if !components.contains_key(id) {
                        components.insert(id.clone(), Arc::new(store.read_component(id).unwrap()));
                    }
                }
                let val = coevo::nn::evaluate(&rec.path, &components, &data.val).unwrap();
                let test = coevo::nn::evaluate(&rec.path, &components, &data.test).unwrap();
                let bits = (val.to_bits(), test.to_bits());
                let first = *first_seen.entry(rec.path.fingerprint()).or_insert(bits);
                let recorded = (
                    rec.path.val_accuracy.to_bits(),
                    rec.path.test_accuracy.to_bits(),
                );
                if bits != recorded || bits != first {
                    audit.mismatches += 1;
                }
                audit.evaluations += 1;
            }
        }
    });
    audit
}

/// Tasks whose retained best score ever decreased from one version to the
/// next.
pub fn score_regressions(store: &Store) -> Vec<TaskId> {
    let mut out = Vec::new();
    for t in store.manifest().tasks.keys() {
        let scores: Vec<f64> = store
            .best_history(t)
            .unwrap()
            .iter()
            .map(|(_, r)| r.path.score)
            .collect();
        if scores.windows(2).any(|w| w[1] < w[0]) {
            out.push(t.clone());
        }
    }
    out
}
