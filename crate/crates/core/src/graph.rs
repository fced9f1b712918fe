//! Shared multitask model representation.
//!
//! A [`Component`] is one immutable, content-addressed layer. A [`ModelPath`]
//! selects an ordered stack of components plus a task-private head. The
//! [`SystemState`] holds every task's current best path, the root model and
//! the component store they resolve against.
//!
//! Cost factors used by the reward live here as well: accounted parameters
//! (parameter count amortized over the best paths sharing a component) and
//! single-sample inference flops.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("invalid component: {0}")]
    InvalidComponent(String),
    #[error("unsupported component kind byte {0}")]
    UnsupportedComponentKind(u8),
    #[error("component {0} is not in the store")]
    DanglingComponent(ComponentId),
    #[error("malformed component blob: {0}")]
    MalformedBlob(String),
    #[error("invalid identifier {0:?}")]
    InvalidIdentifier(String),
}

fn check_identifier(s: &str) -> Result<(), GraphError> {
    let ok = !s.is_empty()
        && s.len() <= 128
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
        && !s.starts_with('-');
    if ok {
        Ok(())
    } else {
        Err(GraphError::InvalidIdentifier(s.to_string()))
    }
}

macro_rules! ident_newtype {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(try_from = "String", into = "String")]
        pub struct $name(String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Result<Self, GraphError> {
                let s = s.into();
                check_identifier(&s)?;
                Ok($name(s))
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl TryFrom<String> for $name {
            type Error = GraphError;
            fn try_from(s: String) -> Result<Self, GraphError> {
                $name::new(s)
            }
        }

        impl From<$name> for String {
            fn from(v: $name) -> String {
                v.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }
    };
}

ident_newtype!(
    /// Task identifier. Restricted to `[A-Za-z0-9_-]` so it can name a directory.
    TaskId
);
ident_newtype!(
    /// Agent identifier, used in barrier marker file names.
    AgentId
);

/// Hex SHA-256 of a component's canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ComponentId(String);

impl ComponentId {
    pub fn parse(s: &str) -> Result<Self, GraphError> {
        if s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            Ok(ComponentId(s.to_string()))
        } else {
            Err(GraphError::InvalidIdentifier(s.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ComponentId {
    type Error = GraphError;
    fn try_from(s: String) -> Result<Self, GraphError> {
        ComponentId::parse(&s)
    }
}

impl From<ComponentId> for String {
    fn from(v: ComponentId) -> String {
        v.0
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    Dense,
    Activation,
    EmbeddingStub,
}

impl ComponentKind {
    pub fn to_byte(self) -> u8 {
        match self {
            ComponentKind::Dense => 0,
            ComponentKind::Activation => 1,
            ComponentKind::EmbeddingStub => 2,
        }
    }

    pub fn from_byte(b: u8) -> Result<Self, GraphError> {
        match b {
            0 => Ok(ComponentKind::Dense),
            1 => Ok(ComponentKind::Activation),
            2 => Ok(ComponentKind::EmbeddingStub),
            other => Err(GraphError::UnsupportedComponentKind(other)),
        }
    }

    /// Whether components of this kind carry trainable parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ComponentKind::Activation)
    }

    pub fn param_count(self, in_dim: u32, out_dim: u32) -> Result<usize, GraphError> {
        if in_dim == 0 || out_dim == 0 {
            return Err(GraphError::InvalidComponent(format!(
                "dimensions must be positive, got {in_dim}x{out_dim}"
            )));
        }
        match self {
            ComponentKind::Dense | ComponentKind::EmbeddingStub => {
                Ok(in_dim as usize * out_dim as usize + out_dim as usize)
            }
            ComponentKind::Activation if in_dim == out_dim => Ok(0),
            ComponentKind::Activation => Err(GraphError::InvalidComponent(format!(
                "activation must be square, got {in_dim}->{out_dim}"
            ))),
        }
    }
}

/// Canonical little-endian serialization shared by hashing and blob storage.
///
/// Layout: `kind: u8, in_dim: u32, out_dim: u32, param_count: u64,
/// origin_len: u32, origin: [u8; origin_len], depth_hint: u32,
/// params: [f32; param_count]`.
pub fn encode_component(
    kind: ComponentKind,
    in_dim: u32,
    out_dim: u32,
    params: &[f32],
    origin_task: Option<&TaskId>,
    depth_hint: u32,
) -> Vec<u8> {
    let origin = origin_task.map(|t| t.as_str().as_bytes()).unwrap_or(&[]);
    let mut buf = Vec::with_capacity(25 + origin.len() + 4 * params.len());
    buf.push(kind.to_byte());
    buf.extend_from_slice(&in_dim.to_le_bytes());
    buf.extend_from_slice(&out_dim.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(origin.len() as u32).to_le_bytes());
    buf.extend_from_slice(origin);
    buf.extend_from_slice(&depth_hint.to_le_bytes());
    for p in params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    buf
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Content id for a component with the given fields.
pub fn component_id(
    kind: ComponentKind,
    in_dim: u32,
    out_dim: u32,
    params: &[f32],
    origin_task: Option<&TaskId>,
    depth_hint: u32,
) -> Result<ComponentId, GraphError> {
    let expected = kind.param_count(in_dim, out_dim)?;
    if params.len() != expected {
        return Err(GraphError::InvalidComponent(format!(
            "{kind:?} {in_dim}x{out_dim} needs {expected} params, got {}",
            params.len()
        )));
    }
    let bytes = encode_component(kind, in_dim, out_dim, params, origin_task, depth_hint);
    Ok(ComponentId(hash_bytes(&bytes)))
}

/// One immutable layer. Fields are private so a constructed component always
/// carries the id matching its content.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    id: ComponentId,
    kind: ComponentKind,
    in_dim: u32,
    out_dim: u32,
    params: Vec<f32>,
    origin_task: Option<TaskId>,
    depth_hint: u32,
}

impl Component {
    pub fn new(
        kind: ComponentKind,
        in_dim: u32,
        out_dim: u32,
        params: Vec<f32>,
        origin_task: Option<TaskId>,
        depth_hint: u32,
    ) -> Result<Self, GraphError> {
        if let Some(bad) = params.iter().find(|p| !p.is_finite()) {
            return Err(GraphError::InvalidComponent(format!(
                "non-finite parameter {bad}"
            )));
        }
        let id = component_id(
            kind,
            in_dim,
            out_dim,
            &params,
            origin_task.as_ref(),
            depth_hint,
        )?;
        Ok(Component {
            id,
            kind,
            in_dim,
            out_dim,
            params,
            origin_task,
            depth_hint,
        })
    }

    pub fn activation(width: u32, depth_hint: u32) -> Self {
        Component::new(
            ComponentKind::Activation,
            width,
            width,
            Vec::new(),
            None,
            depth_hint,
        )
        .expect("square activation is always valid")
    }

    pub fn id(&self) -> &ComponentId {
        &self.id
    }
    pub fn kind(&self) -> ComponentKind {
        self.kind
    }
    pub fn in_dim(&self) -> u32 {
        self.in_dim
    }
    pub fn out_dim(&self) -> u32 {
        self.out_dim
    }
    pub fn params(&self) -> &[f32] {
        &self.params
    }
    pub fn origin_task(&self) -> Option<&TaskId> {
        self.origin_task.as_ref()
    }
    pub fn depth_hint(&self) -> u32 {
        self.depth_hint
    }
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode_component(
            self.kind,
            self.in_dim,
            self.out_dim,
            &self.params,
            self.origin_task.as_ref(),
            self.depth_hint,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let mut r = Reader { bytes, pos: 0 };
        let kind = ComponentKind::from_byte(r.take::<1>()?[0])?;
        let in_dim = u32::from_le_bytes(r.take()?);
        let out_dim = u32::from_le_bytes(r.take()?);
        let count = u64::from_le_bytes(r.take()?);
        let origin_len = u32::from_le_bytes(r.take()?) as usize;
        let origin = r.slice(origin_len)?;
        let origin_task = if origin.is_empty() {
            None
        } else {
            let s = std::str::from_utf8(origin)
                .map_err(|e| GraphError::MalformedBlob(format!("origin task: {e}")))?;
            Some(TaskId::new(s)?)
        };
        let depth_hint = u32::from_le_bytes(r.take()?);
        let remaining = bytes.len() - r.pos;
        if count.checked_mul(4) != Some(remaining as u64) {
            return Err(GraphError::MalformedBlob(format!(
                "header declares {count} params but {remaining} payload bytes follow"
            )));
        }
        let params = r.bytes[r.pos..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Component::new(kind, in_dim, out_dim, params, origin_task, depth_hint)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn slice(&mut self, n: usize) -> Result<&'a [u8], GraphError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| GraphError::MalformedBlob("truncated header".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N], GraphError> {
        let s = self.slice(N)?;
        let mut out = [0u8; N];
        out.copy_from_slice(s);
        Ok(out)
    }
}

/// Input resolution option. Modeled as a stride over the raw input features
/// consumed by the embedding stub.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputResolution {
    High,
    Low,
}

impl InputResolution {
    pub fn stride(self) -> u32 {
        match self {
            InputResolution::High => 1,
            InputResolution::Low => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: u32,
    pub epochs: u32,
    pub input_resolution: InputResolution,
}

/// Discrete grids for every mutable hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub learning_rate: Vec<f64>,
    pub momentum: Vec<f64>,
    pub batch_size: Vec<u32>,
    pub epochs: Vec<u32>,
    pub input_resolution: Vec<InputResolution>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            learning_rate: vec![0.01, 0.03, 0.1, 0.3],
            momentum: vec![0.0, 0.5, 0.8, 0.9],
            batch_size: vec![16, 32, 64],
            epochs: vec![2],
            input_resolution: vec![InputResolution::High, InputResolution::Low],
        }
    }
}

impl SearchSpace {
    /// Grid midpoints (lower middle for even-length grids); used for the root.
    pub fn midpoint(&self) -> HyperParams {
        fn mid<T: Copy>(v: &[T]) -> T {
            v[(v.len() - 1) / 2]
        }
        HyperParams {
            learning_rate: mid(&self.learning_rate),
            momentum: mid(&self.momentum),
            batch_size: mid(&self.batch_size),
            epochs: mid(&self.epochs),
            input_resolution: self.input_resolution[0],
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.learning_rate.is_empty()
            || self.momentum.is_empty()
            || self.batch_size.is_empty()
            || self.epochs.is_empty()
            || self.input_resolution.is_empty()
        {
            return Err("every search-space grid needs at least one value".into());
        }
        if self
            .learning_rate
            .iter()
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err("learning rates must be positive".into());
        }
        if self.momentum.iter().any(|&v| !(0.0..1.0).contains(&v)) {
            return Err("momentum values must lie in [0, 1)".into());
        }
        if self.batch_size.contains(&0) || self.epochs.contains(&0) {
            return Err("batch sizes and epochs must be positive".into());
        }
        Ok(())
    }

    /// Names of fields whose value is not a member of its grid.
    pub fn off_grid(&self, hp: &HyperParams) -> Vec<&'static str> {
        let mut bad = Vec::new();
        if !self.learning_rate.contains(&hp.learning_rate) {
            bad.push("learning_rate");
        }
        if !self.momentum.contains(&hp.momentum) {
            bad.push("momentum");
        }
        if !self.batch_size.contains(&hp.batch_size) {
            bad.push("batch_size");
        }
        if !self.epochs.contains(&hp.epochs) {
            bad.push("epochs");
        }
        if !self.input_resolution.contains(&hp.input_resolution) {
            bad.push("input_resolution");
        }
        bad
    }
}

/// Learned per-path mutation probabilities, keyed by action descriptor.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MuTable(pub BTreeMap<String, f64>);

impl MuTable {
    pub fn get_or(&self, descriptor: &str, default: f64) -> f64 {
        self.0.get(descriptor).copied().unwrap_or(default)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBounds {
    pub min_layers: usize,
    pub max_layers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPath {
    pub task_id: TaskId,
    pub component_ids: Vec<ComponentId>,
    pub head_id: ComponentId,
    pub hyperparams: HyperParams,
    pub mu: MuTable,
    pub score: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub generation_born: u64,
    pub parent_fingerprint: Option<String>,
}

impl ModelPath {
    /// Hash of the canonical JSON form; children record it as their parent link.
    pub fn fingerprint(&self) -> String {
        hash_bytes(&crate::canonical::to_vec(self).expect("model paths always serialize"))
    }

    /// Layer ids followed by the head id.
    pub fn all_ids(&self) -> impl Iterator<Item = &ComponentId> {
        self.component_ids
            .iter()
            .chain(std::iter::once(&self.head_id))
    }
}

/// The seeded initial stack every lineage descends from. It has no head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RootModel {
    pub component_ids: Vec<ComponentId>,
    pub hyperparams: HyperParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInfo {
    pub input_dim: u32,
    pub n_classes: u32,
}

pub trait ComponentLookup {
    fn component(&self, id: &ComponentId) -> Option<&Component>;

    fn require(&self, id: &ComponentId) -> Result<&Component, GraphError> {
        self.component(id)
            .ok_or_else(|| GraphError::DanglingComponent(id.clone()))
    }
}

pub type ComponentMap = BTreeMap<ComponentId, Arc<Component>>;

impl ComponentLookup for ComponentMap {
    fn component(&self, id: &ComponentId) -> Option<&Component> {
        self.get(id).map(|c| c.as_ref())
    }
}

/// A lookup that consults agent-local, unpublished components first.
pub struct Overlay<'a, B: ComponentLookup + ?Sized> {
    pub base: &'a B,
    pub local: &'a ComponentMap,
}

impl<B: ComponentLookup + ?Sized> ComponentLookup for Overlay<'_, B> {
    fn component(&self, id: &ComponentId) -> Option<&Component> {
        self.local.component(id).or_else(|| self.base.component(id))
    }
}

/// The shared multitask system as seen by one reader.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemState {
    pub root: RootModel,
    pub tasks: BTreeMap<TaskId, TaskInfo>,
    pub bounds: LayerBounds,
    pub search_space: SearchSpace,
    pub bests: BTreeMap<TaskId, ModelPath>,
    pub components: ComponentMap,
    /// Number of contiguous completed iterations per registered agent.
    pub progress: BTreeMap<AgentId, u64>,
}

impl ComponentLookup for SystemState {
    fn component(&self, id: &ComponentId) -> Option<&Component> {
        self.components.component(id)
    }
}

impl SystemState {
    pub fn insert_component(&mut self, c: Arc<Component>) {
        self.components.entry(c.id().clone()).or_insert(c);
    }

    /// Order-independent digest over bests, root and component ids.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for id in &self.root.component_ids {
            h.update(id.as_str());
        }
        for (t, p) in &self.bests {
            h.update(t.as_str());
            h.update(p.fingerprint());
        }
        for (id, c) in &self.components {
            h.update(id.as_str());
            h.update(c.to_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DanglingComponent(ComponentId),
    /// Position whose input width disagrees with the previous output width.
    /// The head is reported at position `component_ids.len()`.
    DimMismatch {
        pos: usize,
    },
    InputDimMismatch {
        expected: u32,
        found: u32,
    },
    HeadClassMismatch {
        expected: u32,
        found: u32,
    },
    LayerCount {
        len: usize,
        min: usize,
        max: usize,
    },
    HyperparamOffGrid(&'static str),
    UnknownTask(TaskId),
    HeadNotDense,
}

/// Collect every structural violation of `path` against `state`.
pub fn validate_path<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    state: &SystemState,
    lookup: &L,
) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    let len = path.component_ids.len();
    let b = state.bounds;
    if len == 0 || len < b.min_layers || len > b.max_layers {
        out.push(Violation::LayerCount {
            len,
            min: b.min_layers,
            max: b.max_layers,
        });
    }
    let task = state.tasks.get(&path.task_id);
    if task.is_none() {
        out.push(Violation::UnknownTask(path.task_id.clone()));
    }
    let mut prev_out: Option<u32> = None;
    for (pos, id) in path.component_ids.iter().enumerate() {
        match lookup.component(id) {
            None => {
                out.push(Violation::DanglingComponent(id.clone()));
                prev_out = None;
            }
            Some(c) => {
                match prev_out {
                    Some(p) if p != c.in_dim() => out.push(Violation::DimMismatch { pos }),
                    None if pos == 0 => {
                        if let Some(t) = task {
                            if t.input_dim != c.in_dim() {
                                out.push(Violation::InputDimMismatch {
                                    expected: t.input_dim,
                                    found: c.in_dim(),
                                });
                            }
                        }
                    }
                    _ => {}
                }
                prev_out = Some(c.out_dim());
            }
        }
    }
    match lookup.component(&path.head_id) {
        None => out.push(Violation::DanglingComponent(path.head_id.clone())),
        Some(h) => {
            if h.kind() != ComponentKind::Dense {
                out.push(Violation::HeadNotDense);
            }
            if let Some(p) = prev_out {
                if p != h.in_dim() {
                    out.push(Violation::DimMismatch { pos: len });
                }
            }
            if let Some(t) = task {
                if t.n_classes != h.out_dim() {
                    out.push(Violation::HeadClassMismatch {
                        expected: t.n_classes,
                        found: h.out_dim(),
                    });
                }
            }
        }
    }
    for field in state.search_space.off_grid(&path.hyperparams) {
        out.push(Violation::HyperparamOffGrid(field));
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

/// Number of paths (layers or head) referencing each component.
pub fn share_counts<'a>(
    paths: impl IntoIterator<Item = &'a ModelPath>,
) -> BTreeMap<ComponentId, usize> {
    let mut counts = BTreeMap::new();
    for p in paths {
        let distinct: BTreeSet<&ComponentId> = p.all_ids().collect();
        for id in distinct {
            *counts.entry(id.clone()).or_insert(0) += 1;
        }
    }
    counts
}

/// Parameter cost of `path` with each component's size divided by the
/// number of best paths using it.
pub fn accounted_parameters_with<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    lookup: &L,
    counts: &BTreeMap<ComponentId, usize>,
) -> Result<f64, GraphError> {
    let mut total = 0.0;
    for id in path.all_ids() {
        let c = lookup.require(id)?;
        let share = counts.get(id).copied().unwrap_or(1).max(1);
        total += c.param_count() as f64 / share as f64;
    }
    Ok(total)
}

/// Accounted parameters with share counts taken over the state's current bests.
pub fn accounted_parameters(path: &ModelPath, state: &SystemState) -> Result<f64, GraphError> {
    let counts = share_counts(state.bests.values());
    accounted_parameters_with(path, state, &counts)
}

/// Accounted parameters of `candidate` as if it replaced its task's best.
pub fn candidate_accounted_parameters<L: ComponentLookup + ?Sized>(
    candidate: &ModelPath,
    state: &SystemState,
    lookup: &L,
) -> Result<f64, GraphError> {
    let others = state
        .bests
        .iter()
        .filter(|(t, _)| **t != candidate.task_id)
        .map(|(_, p)| p);
    let counts = share_counts(others.chain(std::iter::once(candidate)));
    accounted_parameters_with(candidate, lookup, &counts)
}

/// Flops of one component for one sample: affine layers count 2·in·out (the
/// embedding stub only over the inputs kept by `stride`), activations count
/// one op per element.
pub fn component_flops(c: &Component, stride: u32) -> f64 {
    let (i, o) = (c.in_dim() as f64, c.out_dim() as f64);
    match c.kind() {
        ComponentKind::Dense => 2.0 * i * o,
        ComponentKind::Activation => o,
        ComponentKind::EmbeddingStub => 2.0 * c.in_dim().div_ceil(stride) as f64 * o,
    }
}

/// Flops for one sample through the whole path including the head.
pub fn inference_flops<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    lookup: &L,
) -> Result<f64, GraphError> {
    let stride = path.hyperparams.input_resolution.stride();
    let mut flops = 0.0;
    for id in path.all_ids() {
        flops += component_flops(lookup.require(id)?, stride);
    }
    Ok(flops)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(i: u32, o: u32, fill: f32) -> Component {
        let n = (i * o + o) as usize;
        Component::new(ComponentKind::Dense, i, o, vec![fill; n], None, 0).unwrap()
    }

    #[test]
    fn id_is_deterministic_and_param_sensitive() {
        let params: Vec<f32> = (0..15).map(|v| v as f32 * 0.1).collect();
        let a = component_id(ComponentKind::Dense, 4, 3, &params, None, 0).unwrap();
        let b = component_id(ComponentKind::Dense, 4, 3, &params, None, 0).unwrap();
        assert_eq!(a, b);
        let mut bumped = params.clone();
        bumped[0] += 1e-6;
        assert_ne!(params[0].to_le_bytes(), bumped[0].to_le_bytes());
        let c = component_id(ComponentKind::Dense, 4, 3, &bumped, None, 0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn wrong_param_length_is_invalid() {
        let err = component_id(ComponentKind::Dense, 4, 3, &[0.0; 14], None, 0).unwrap_err();
        assert!(matches!(err, GraphError::InvalidComponent(_)));
        assert!(Component::new(ComponentKind::Activation, 3, 4, vec![], None, 0).is_err());
    }

    #[test]
    fn blob_round_trip_and_tamper() {
        let c = Component::new(
            ComponentKind::EmbeddingStub,
            3,
            2,
            vec![0.5; 8],
            Some(TaskId::new("t0").unwrap()),
            4,
        )
        .unwrap();
        let bytes = c.to_bytes();
        assert_eq!(hash_bytes(&bytes), c.id().as_str());
        let back = Component::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert!(Component::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = 9;
        assert_eq!(
            Component::from_bytes(&bad),
            Err(GraphError::UnsupportedComponentKind(9))
        );
    }

    #[test]
    fn header_layout_is_bit_exact() {
        let c = Component::new(ComponentKind::Dense, 1, 1, vec![1.0, -2.0], None, 7).unwrap();
        let expected: Vec<u8> = [
            vec![0u8],
            1u32.to_le_bytes().to_vec(),
            1u32.to_le_bytes().to_vec(),
            2u64.to_le_bytes().to_vec(),
            0u32.to_le_bytes().to_vec(),
            7u32.to_le_bytes().to_vec(),
            1.0f32.to_le_bytes().to_vec(),
            (-2.0f32).to_le_bytes().to_vec(),
        ]
        .concat();
        assert_eq!(c.to_bytes(), expected);
    }

    #[test]
    fn identifiers_reject_path_characters() {
        assert!(TaskId::new("a/b").is_err());
        assert!(TaskId::new("").is_err());
        assert!(TaskId::new("..").is_err());
        assert!(TaskId::new("task_01-x").is_ok());
        assert!(ComponentId::parse("abc").is_err());
    }

    #[test]
    fn flops_follow_the_counting_rule() {
        let l = dense(4, 3, 0.0);
        let h = dense(3, 2, 0.0);
        let act = Component::activation(3, 1);
        let mut store = ComponentMap::new();
        for c in [&l, &h, &act] {
            store.insert(c.id().clone(), Arc::new(c.clone()));
        }
        let mut path = ModelPath {
            task_id: TaskId::new("t").unwrap(),
            component_ids: vec![l.id().clone()],
            head_id: h.id().clone(),
            hyperparams: SearchSpace::default().midpoint(),
            mu: MuTable::default(),
            score: 0.0,
            val_accuracy: 0.0,
            test_accuracy: 0.0,
            generation_born: 0,
            parent_fingerprint: None,
        };
        assert_eq!(inference_flops(&path, &store).unwrap(), 36.0);
        path.component_ids.push(act.id().clone());
        assert_eq!(inference_flops(&path, &store).unwrap(), 39.0);
    }
}
