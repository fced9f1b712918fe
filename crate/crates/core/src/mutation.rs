//! Evolutionary operators: parent sampling, mutation sampling through the
//! per-path μ table, mutation application and μ updates.
//!
//! Paths are laid out as `[embedding, tanh, (dense, tanh)*]` plus a head.
//! Structural mutations add or remove whole `(dense, tanh)` blocks at the
//! top, so every path keeps that shape.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    Component, ComponentKind, ComponentLookup, ComponentMap, GraphError, ModelPath, MuTable,
    SearchSpace, SystemState, TaskId,
};
use crate::nn::{fresh_head, init_near_identity};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MutationError {
    #[error("no parent available: the system has no root model")]
    NoParentAvailable,
    #[error("task {0} is not registered in the system")]
    UnknownTask(TaskId),
    #[error("illegal mutation {action} for this parent: {reason}")]
    IllegalMutation { action: String, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MutationConfig {
    /// Probability of picking the task's own best path as parent.
    pub parent_own_prob: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub p_init: f64,
    /// Multiplicative μ step applied when a child wins.
    pub eta: f64,
    /// Noise gain for layers added on top (0 gives an exact identity).
    pub new_layer_gain: f64,
}

impl Default for MutationConfig {
    fn default() -> Self {
        MutationConfig {
            parent_own_prob: 0.5,
            p_min: 0.05,
            p_max: 0.9,
            p_init: 0.2,
            eta: 0.2,
            new_layer_gain: 0.1,
        }
    }
}

impl MutationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.parent_own_prob) {
            return Err("parent_own_prob must lie in [0, 1]".into());
        }
        if !(0.0 < self.p_min && self.p_min < self.p_max && self.p_max < 1.0) {
            return Err("need 0 < p_min < p_max < 1".into());
        }
        if !(self.p_min..=self.p_max).contains(&self.p_init) {
            return Err("p_init must lie in [p_min, p_max]".into());
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err("eta must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperField {
    LearningRate,
    Momentum,
    BatchSize,
    InputResolution,
}

impl HyperField {
    pub const ALL: [HyperField; 4] = [
        HyperField::LearningRate,
        HyperField::Momentum,
        HyperField::BatchSize,
        HyperField::InputResolution,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HyperField::LearningRate => "learning_rate",
            HyperField::Momentum => "momentum",
            HyperField::BatchSize => "batch_size",
            HyperField::InputResolution => "input_resolution",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MutationAction {
    SwapTransferSource(usize),
    CloneLayer(usize),
    RemoveTopLayer,
    AddLayerOnTop,
    HyperparamStep(HyperField, Direction),
}

impl MutationAction {
    /// Key of this action in a μ table.
    pub fn descriptor(&self) -> String {
        match self {
            MutationAction::CloneLayer(p) => format!("clone@{p}"),
            MutationAction::SwapTransferSource(p) => format!("swap@{p}"),
            MutationAction::RemoveTopLayer => "remove_top".into(),
            MutationAction::AddLayerOnTop => "add_top".into(),
            MutationAction::HyperparamStep(f, Direction::Up) => format!("hp:{}:up", f.name()),
            MutationAction::HyperparamStep(f, Direction::Down) => format!("hp:{}:down", f.name()),
        }
    }
}

impl fmt::Display for MutationAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParentKind {
    Own,
    Root,
    CrossTask(TaskId),
}

/// An untrained child (or a sampled parent before mutation).
#[derive(Debug, Clone)]
pub struct Candidate {
    pub path: ModelPath,
    /// Layer positions that will be trained. The head always trains.
    pub unfrozen: BTreeSet<usize>,
    /// Fresh components not yet in any store.
    pub local: ComponentMap,
    pub applied: Vec<MutationAction>,
    pub parent_kind: ParentKind,
    pub parent_fingerprint: Option<String>,
}

fn reheaded(
    source: &ModelPath,
    ids: Vec<crate::graph::ComponentId>,
    task: &TaskId,
    state: &SystemState,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelPath, ComponentMap), MutationError> {
    let info = state
        .tasks
        .get(task)
        .ok_or_else(|| MutationError::UnknownTask(task.clone()))?;
    let top = state.require(ids.last().ok_or(MutationError::NoParentAvailable)?)?;
    let head = fresh_head(top.out_dim(), info.n_classes, ids.len() as u32, rng);
    let mut path = source.clone();
    path.task_id = task.clone();
    path.component_ids = ids;
    path.head_id = head.id().clone();
    path.score = 0.0;
    path.val_accuracy = 0.0;
    path.test_accuracy = 0.0;
    path.parent_fingerprint = None;
    let mut local = ComponentMap::new();
    local.insert(head.id().clone(), Arc::new(head));
    Ok((path, local))
}

fn from_root(
    task: &TaskId,
    state: &SystemState,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate, MutationError> {
    if state.root.component_ids.is_empty() {
        return Err(MutationError::NoParentAvailable);
    }
    let template = ModelPath {
        task_id: task.clone(),
        component_ids: Vec::new(),
        head_id: state.root.component_ids[0].clone(),
        hyperparams: state.root.hyperparams.clone(),
        mu: MuTable::default(),
        score: 0.0,
        val_accuracy: 0.0,
        test_accuracy: 0.0,
        generation_born: 0,
        parent_fingerprint: None,
    };
    let (path, local) = reheaded(
        &template,
        state.root.component_ids.clone(),
        task,
        state,
        rng,
    )?;
    Ok(Candidate {
        path,
        unfrozen: BTreeSet::new(),
        local,
        applied: Vec::new(),
        parent_kind: ParentKind::Root,
        parent_fingerprint: None,
    })
}

/// Pick a parent for `task`: its own best with probability `parent_own_prob`,
/// otherwise a uniformly chosen best of another task, re-headed for `task`
/// with every transferred layer frozen. Missing bests fall back to the
/// task's own best, then to the root.
pub fn sample_parent(
    state: &SystemState,
    task: &TaskId,
    cfg: &MutationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate, MutationError> {
    if state.root.component_ids.is_empty() {
        return Err(MutationError::NoParentAvailable);
    }
    if !state.tasks.contains_key(task) {
        return Err(MutationError::UnknownTask(task.clone()));
    }
    let own_draw = rng.random::<f64>() < cfg.parent_own_prob;
    let others: Vec<&ModelPath> = state
        .bests
        .iter()
        .filter(|(t, _)| *t != task)
        .map(|(_, p)| p)
        .collect();
    if !own_draw && !others.is_empty() {
        let src = others[rng.random_range(0..others.len())];
        let (path, local) = reheaded(src, src.component_ids.clone(), task, state, rng)?;
        return Ok(Candidate {
            path,
            unfrozen: BTreeSet::new(),
            local,
            applied: Vec::new(),
            parent_kind: ParentKind::CrossTask(src.task_id.clone()),
            parent_fingerprint: Some(src.fingerprint()),
        });
    }
    match state.bests.get(task) {
        Some(own) => Ok(Candidate {
            path: own.clone(),
            unfrozen: BTreeSet::new(),
            local: ComponentMap::new(),
            applied: Vec::new(),
            parent_kind: ParentKind::Own,
            parent_fingerprint: Some(own.fingerprint()),
        }),
        None => from_root(task, state, rng),
    }
}

fn grid_index<T: PartialEq>(grid: &[T], v: &T) -> Option<usize> {
    grid.iter().position(|g| g == v)
}

fn can_step(space: &SearchSpace, path: &ModelPath, field: HyperField, dir: Direction) -> bool {
    let hp = &path.hyperparams;
    let (idx, len) = match field {
        HyperField::LearningRate => (
            grid_index(&space.learning_rate, &hp.learning_rate),
            space.learning_rate.len(),
        ),
        HyperField::Momentum => (
            grid_index(&space.momentum, &hp.momentum),
            space.momentum.len(),
        ),
        HyperField::BatchSize => (
            grid_index(&space.batch_size, &hp.batch_size),
            space.batch_size.len(),
        ),
        HyperField::InputResolution => (
            grid_index(&space.input_resolution, &hp.input_resolution),
            space.input_resolution.len(),
        ),
    };
    match (idx, dir) {
        (Some(i), Direction::Up) => i + 1 < len,
        (Some(i), Direction::Down) => i > 0,
        (None, _) => false,
    }
}

fn step(space: &SearchSpace, path: &mut ModelPath, field: HyperField, dir: Direction) {
    fn next<T: PartialEq + Copy>(grid: &[T], v: &mut T, dir: Direction) {
        let i = grid.iter().position(|g| g == v).expect("legality checked");
        *v = match dir {
            Direction::Up => grid[i + 1],
            Direction::Down => grid[i - 1],
        };
    }
    let hp = &mut path.hyperparams;
    match field {
        HyperField::LearningRate => next(&space.learning_rate, &mut hp.learning_rate, dir),
        HyperField::Momentum => next(&space.momentum, &mut hp.momentum, dir),
        HyperField::BatchSize => next(&space.batch_size, &mut hp.batch_size, dir),
        HyperField::InputResolution => next(&space.input_resolution, &mut hp.input_resolution, dir),
    }
}

/// Components at `pos` of other tasks' bests that could replace the
/// reference at `pos` of `path`: same kind, dims and depth, different id.
fn swap_sources<'a, L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    pos: usize,
    state: &'a SystemState,
    lookup: &L,
) -> Vec<&'a crate::graph::ComponentId> {
    let Some(cur) = lookup.component(&path.component_ids[pos]) else {
        return Vec::new();
    };
    if !cur.kind().is_trainable() {
        return Vec::new();
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (t, best) in &state.bests {
        if *t == path.task_id {
            continue;
        }
        let Some(id) = best.component_ids.get(pos) else {
            continue;
        };
        if *id == path.component_ids[pos] || !seen.insert(id) {
            continue;
        }
        if let Some(c) = state.component(id) {
            if c.kind() == cur.kind()
                && c.in_dim() == cur.in_dim()
                && c.out_dim() == cur.out_dim()
                && c.depth_hint() as usize == pos
            {
                out.push(id);
            }
        }
    }
    out
}

fn top_block_removable<L: ComponentLookup + ?Sized>(path: &ModelPath, lookup: &L) -> bool {
    let n = path.component_ids.len();
    if n < 3 {
        return false;
    }
    let kind = |i: usize| lookup.component(&path.component_ids[i]).map(|c| c.kind());
    kind(n - 1) == Some(ComponentKind::Activation) && kind(n - 2) == Some(ComponentKind::Dense)
}

/// Every action applicable to `path`, in canonical order.
pub fn legal_actions<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    state: &SystemState,
    lookup: &L,
) -> Vec<MutationAction> {
    let n = path.component_ids.len();
    let mut out = Vec::new();
    for p in 0..n {
        if !swap_sources(path, p, state, lookup).is_empty() {
            out.push(MutationAction::SwapTransferSource(p));
        }
    }
    for p in 0..n {
        if lookup
            .component(&path.component_ids[p])
            .is_some_and(|c| c.kind().is_trainable())
        {
            out.push(MutationAction::CloneLayer(p));
        }
    }
    if n >= state.bounds.min_layers + 2 && top_block_removable(path, lookup) {
        out.push(MutationAction::RemoveTopLayer);
    }
    if n + 2 <= state.bounds.max_layers {
        out.push(MutationAction::AddLayerOnTop);
    }
    for f in HyperField::ALL {
        for d in [Direction::Up, Direction::Down] {
            if can_step(&state.search_space, path, f, d) {
                out.push(MutationAction::HyperparamStep(f, d));
            }
        }
    }
    out
}

/// Include each legal action independently with its μ probability, then
/// resolve conflicts: removal beats addition and drops actions on the
/// removed block; opposite steps on one field are settled by a fair coin.
pub fn sample_mutations<L: ComponentLookup + ?Sized>(
    parent: &ModelPath,
    state: &SystemState,
    lookup: &L,
    cfg: &MutationConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<MutationAction> {
    let legal = legal_actions(parent, state, lookup);
    let mut drawn: Vec<MutationAction> = legal
        .into_iter()
        .filter(|a| rng.random::<f64>() < parent.mu.get_or(&a.descriptor(), cfg.p_init))
        .collect();
    let n = parent.component_ids.len();
    if drawn.contains(&MutationAction::RemoveTopLayer) {
        drawn.retain(|a| match a {
            MutationAction::AddLayerOnTop => false,
            MutationAction::CloneLayer(p) | MutationAction::SwapTransferSource(p) => *p + 2 < n,
            _ => true,
        });
    }
    for f in HyperField::ALL {
        let up = MutationAction::HyperparamStep(f, Direction::Up);
        let down = MutationAction::HyperparamStep(f, Direction::Down);
        if drawn.contains(&up) && drawn.contains(&down) {
            let loser = if rng.random::<bool>() { down } else { up };
            drawn.retain(|a| *a != loser);
        }
    }
    drawn
}

fn illegal(action: &MutationAction, reason: &str) -> MutationError {
    MutationError::IllegalMutation {
        action: action.descriptor(),
        reason: reason.into(),
    }
}

/// Apply `actions` to `parent`, producing an untrained child. Published
/// components are never modified: clones only mark a position trainable and
/// new layers live in the child's local map.
pub fn apply_mutations(
    parent: Candidate,
    actions: &[MutationAction],
    state: &SystemState,
    cfg: &MutationConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Candidate, MutationError> {
    let lookup = crate::graph::Overlay {
        base: state,
        local: &parent.local,
    };
    let legal = legal_actions(&parent.path, state, &lookup);
    let n = parent.path.component_ids.len();
    let mut sorted: Vec<MutationAction> = actions.to_vec();
    sorted.sort();
    sorted.dedup();
    for a in &sorted {
        if !legal.contains(a) {
            return Err(illegal(a, "not applicable to the parent's shape"));
        }
    }
    let removing = sorted.contains(&MutationAction::RemoveTopLayer);
    for a in &sorted {
        match a {
            MutationAction::AddLayerOnTop if removing => {
                return Err(illegal(a, "conflicts with remove_top"))
            }
            MutationAction::CloneLayer(p) | MutationAction::SwapTransferSource(p)
                if removing && *p + 2 >= n =>
            {
                return Err(illegal(a, "targets the removed block"))
            }
            _ => {}
        }
    }
    for f in HyperField::ALL {
        if sorted.contains(&MutationAction::HyperparamStep(f, Direction::Up))
            && sorted.contains(&MutationAction::HyperparamStep(f, Direction::Down))
        {
            return Err(illegal(
                &MutationAction::HyperparamStep(f, Direction::Up),
                "opposite steps on one field",
            ));
        }
    }

    let mut mu = parent.path.mu.clone();
    for a in &legal {
        mu.0.entry(a.descriptor()).or_insert(cfg.p_init);
    }

    let mut child = parent.clone();
    child.path.mu = mu;
    for a in &sorted {
        match *a {
            MutationAction::SwapTransferSource(p) => {
                let sources = swap_sources(&parent.path, p, state, &lookup);
                let pick = sources[rng.random_range(0..sources.len())].clone();
                child.path.component_ids[p] = pick;
            }
            MutationAction::CloneLayer(p) => {
                child.unfrozen.insert(p);
            }
            MutationAction::RemoveTopLayer => {
                child.path.component_ids.truncate(n - 2);
                child.unfrozen.retain(|&p| p < n - 2);
            }
            MutationAction::AddLayerOnTop => {
                let width = lookup.require(&parent.path.component_ids[n - 1])?.out_dim();
                let params = init_near_identity(width, cfg.new_layer_gain, rng);
                let dense =
                    Component::new(ComponentKind::Dense, width, width, params, None, n as u32)?;
                let act = Component::activation(width, n as u32 + 1);
                child.path.component_ids.push(dense.id().clone());
                child.path.component_ids.push(act.id().clone());
                child.unfrozen.insert(n);
                child.local.insert(dense.id().clone(), Arc::new(dense));
                child.local.insert(act.id().clone(), Arc::new(act));
            }
            MutationAction::HyperparamStep(f, d) => {
                step(&state.search_space, &mut child.path, f, d)
            }
        }
    }
    child.applied = sorted;
    child.path.parent_fingerprint = parent.parent_fingerprint.clone();
    Ok(child)
}

/// After a win, scale applied actions by `1 + eta` and every other entry by
/// `1 - eta`, clamped to `[p_min, p_max]`. Losing children leave μ untouched.
pub fn update_mu(
    parent_mu: &MuTable,
    applied: &[MutationAction],
    child_won: bool,
    cfg: &MutationConfig,
) -> MuTable {
    if !child_won {
        return parent_mu.clone();
    }
    let applied: BTreeSet<String> = applied.iter().map(|a| a.descriptor()).collect();
    let mut out = parent_mu.clone();
    for d in &applied {
        out.0.entry(d.clone()).or_insert(cfg.p_init);
    }
    for (d, p) in out.0.iter_mut() {
        let f = if applied.contains(d) {
            1.0 + cfg.eta
        } else {
            1.0 - cfg.eta
        };
        *p = (*p * f).clamp(cfg.p_min, cfg.p_max);
    }
    out
}
