//! Minimal differentiable engine for dense/tanh stacks.
//!
//! Parameters are stored as `f32` inside components, but all arithmetic runs
//! in `f64`. Training produces fresh components and never touches the ones
//! it read from.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Component, ComponentKind, ComponentLookup, GraphError, ModelPath};
use crate::rng::Seed;
use crate::tasks::Split;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty split")]
    EmptySplit,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid training budget: {0}")]
    InvalidBudget(String),
    #[error("position {0} is not a trainable layer of the path")]
    InvalidPosition(usize),
    #[error("training diverged (non-finite loss or parameters)")]
    Diverged,
}

/// Rows of `inputs` are samples; `labels[r]` is the class of row `r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub in_dim: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Training budget for one child.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainBudget {
    pub epochs: u32,
    pub samples_cap: u32,
    /// When set, every epoch draws exactly `samples_cap` samples (cycling the
    /// training set if it is smaller), so all tasks get the same budget.
    #[serde(default)]
    pub fixed_samples: bool,
}

impl TrainBudget {
    pub fn samples_per_epoch(&self, train_size: usize) -> usize {
        if self.fixed_samples {
            self.samples_cap as usize
        } else {
            train_size.min(self.samples_cap as usize)
        }
    }

    pub fn steps(&self, train_size: usize, batch_size: usize) -> usize {
        self.epochs as usize * (self.samples_per_epoch(train_size) / batch_size.max(1))
    }

    /// Sample passes per child, the unit the speedup bound is expressed in.
    pub fn sample_passes(&self, train_size: usize) -> u64 {
        self.epochs as u64 * self.samples_per_epoch(train_size) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    Layer(usize),
    Head,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub new_components: Vec<(Slot, Component)>,
    pub final_train_loss: f64,
    pub steps_executed: usize,
}

impl TrainOutcome {
    /// Rewrite the references of `path` to point at the retrained components.
    pub fn apply_to(&self, path: &ModelPath) -> ModelPath {
        let mut out = path.clone();
        for (slot, c) in &self.new_components {
            match slot {
                Slot::Layer(p) => out.component_ids[*p] = c.id().clone(),
                Slot::Head => out.head_id = c.id().clone(),
            }
        }
        out
    }
}

/// Gradients for trainable slots only. Frozen layers have no entry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub layers: BTreeMap<usize, Vec<f64>>,
    pub head: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub in_dim: usize,
    pub out_dim: usize,
    pub stride: usize,
    /// Row-major weights `w[o * in_dim + i]` followed by `out_dim` biases.
    pub params: Vec<f64>,
}

impl Affine {
    fn forward_row(&self, x: &[f64], y: &mut [f64]) {
        let (w, b) = self.params.split_at(self.in_dim * self.out_dim);
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = b[o];
            if self.stride == 1 {
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
            } else {
                for i in (0..self.in_dim).step_by(self.stride) {
                    acc += row[i] * x[i];
                }
            }
            *yo = acc;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Affine(Affine),
    Tanh(usize),
}

impl Layer {
    fn out_dim(&self) -> usize {
        match self {
            Layer::Affine(a) => a.out_dim,
            Layer::Tanh(w) => *w,
        }
    }
}

/// A path materialized into `f64` buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub head: Affine,
}

fn affine_from(c: &Component, stride: usize) -> Affine {
    Affine {
        in_dim: c.in_dim() as usize,
        out_dim: c.out_dim() as usize,
        stride,
        params: c.params().iter().map(|&p| p as f64).collect(),
    }
}

impl Network {
    pub fn from_path<L: ComponentLookup + ?Sized>(
        path: &ModelPath,
        lookup: &L,
    ) -> Result<Self, NnError> {
        let stride = path.hyperparams.input_resolution.stride() as usize;
        let mut layers = Vec::with_capacity(path.component_ids.len());
        let mut width: Option<usize> = None;
        for id in &path.component_ids {
            let c = lookup.require(id)?;
            if let Some(w) = width {
                if w != c.in_dim() as usize {
                    return Err(NnError::DimMismatch {
                        expected: w,
                        found: c.in_dim() as usize,
                    });
                }
            }
            layers.push(match c.kind() {
                ComponentKind::Dense => Layer::Affine(affine_from(c, 1)),
                ComponentKind::EmbeddingStub => Layer::Affine(affine_from(c, stride)),
                ComponentKind::Activation => Layer::Tanh(c.out_dim() as usize),
            });
            width = Some(c.out_dim() as usize);
        }
        let h = lookup.require(&path.head_id)?;
        if let Some(w) = width {
            if w != h.in_dim() as usize {
                return Err(NnError::DimMismatch {
                    expected: w,
                    found: h.in_dim() as usize,
                });
            }
        }
        Ok(Network {
            layers,
            head: affine_from(h, 1),
        })
    }

    pub fn in_dim(&self) -> usize {
        match self.layers.first() {
            Some(Layer::Affine(a)) => a.in_dim,
            Some(Layer::Tanh(w)) => *w,
            None => self.head.in_dim,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.head.out_dim
    }

    fn check_inputs(&self, inputs: &[f64], in_dim: usize) -> Result<usize, NnError> {
        if in_dim != self.in_dim() {
            return Err(NnError::DimMismatch {
                expected: self.in_dim(),
                found: in_dim,
            });
        }
        if !inputs.len().is_multiple_of(in_dim) {
            return Err(NnError::InvalidBatch(
                "input length is not a multiple of in_dim".into(),
            ));
        }
        Ok(inputs.len() / in_dim)
    }

    /// All intermediate activations; `acts[0]` is the input and the last
    /// entry is the logits.
    fn activations(&self, inputs: &[f64], rows: usize) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 2);
        acts.push(inputs.to_vec());
        let mut width = self.in_dim();
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let out_w = layer.out_dim();
            let mut y = vec![0.0; rows * out_w];
            match layer {
                Layer::Affine(a) => {
                    for r in 0..rows {
                        a.forward_row(
                            &x[r * width..(r + 1) * width],
                            &mut y[r * out_w..(r + 1) * out_w],
                        );
                    }
                }
                Layer::Tanh(_) => {
                    for (yi, xi) in y.iter_mut().zip(x) {
                        *yi = xi.tanh();
                    }
                }
            }
            acts.push(y);
            width = out_w;
        }
        let x = acts.last().unwrap();
        let c = self.head.out_dim;
        let mut logits = vec![0.0; rows * c];
        for r in 0..rows {
            self.head.forward_row(
                &x[r * width..(r + 1) * width],
                &mut logits[r * c..(r + 1) * c],
            );
        }
        acts.push(logits);
        acts
    }

    pub fn forward(&self, inputs: &[f64], in_dim: usize) -> Result<Vec<f64>, NnError> {
        let rows = self.check_inputs(inputs, in_dim)?;
        Ok(self.activations(inputs, rows).pop().unwrap())
    }

    /// Mean softmax cross-entropy, computed by the forward pass alone.
    pub fn loss(&self, batch: &Batch) -> Result<f64, NnError> {
        let rows = self.check_batch(batch)?;
        let logits = self.activations(&batch.inputs, rows).pop().unwrap();
        let c = self.n_classes();
        let total: f64 = (0..rows)
            .map(|r| {
                let z = &logits[r * c..(r + 1) * c];
                log_sum_exp(z) - z[batch.labels[r]]
            })
            .sum();
        Ok(total / rows as f64)
    }

    fn check_batch(&self, batch: &Batch) -> Result<usize, NnError> {
        if batch.is_empty() {
            return Err(NnError::EmptyBatch);
        }
        let rows = self.check_inputs(&batch.inputs, batch.in_dim)?;
        if rows != batch.labels.len() {
            return Err(NnError::InvalidBatch(
                "label count differs from row count".into(),
            ));
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= self.n_classes()) {
            return Err(NnError::InvalidBatch(format!("label {l} out of range")));
        }
        if batch.inputs.iter().any(|v| !v.is_finite()) {
            return Err(NnError::InvalidBatch("non-finite input".into()));
        }
        Ok(rows)
    }

    /// Loss and gradients for the head and the listed layer positions.
    /// Backpropagation stops below the lowest trainable layer.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        trainable: &BTreeSet<usize>,
    ) -> Result<(f64, Gradients), NnError> {
        for &p in trainable {
            match self.layers.get(p) {
                Some(Layer::Affine(_)) => {}
                _ => return Err(NnError::InvalidPosition(p)),
            }
        }
        let rows = self.check_batch(batch)?;
        let acts = self.activations(&batch.inputs, rows);
        let c = self.n_classes();
        let logits = acts.last().unwrap();

        let mut loss = 0.0;
        let mut delta = vec![0.0; rows * c];
        let inv = 1.0 / rows as f64;
        for r in 0..rows {
            let z = &logits[r * c..(r + 1) * c];
            let lse = log_sum_exp(z);
            let label = batch.labels[r];
            loss += lse - z[label];
            for k in 0..c {
                let p = (z[k] - lse).exp();
                delta[r * c + k] = (p - if k == label { 1.0 } else { 0.0 }) * inv;
            }
        }
        loss *= inv;

        let top = &acts[self.layers.len()];
        let lowest = trainable.iter().next().copied();
        let (head_grad, mut delta) =
            affine_backward(&self.head, top, &delta, rows, lowest.is_some());
        let mut grads = Gradients {
            layers: BTreeMap::new(),
            head: head_grad,
        };

        if let Some(lowest) = lowest {
            for l in (lowest..self.layers.len()).rev() {
                match &self.layers[l] {
                    Layer::Tanh(_) => {
                        for (d, y) in delta.iter_mut().zip(&acts[l + 1]) {
                            *d *= 1.0 - y * y;
                        }
                    }
                    Layer::Affine(a) => {
                        let need_input_grad = l > lowest;
                        let (g, d) = affine_backward(a, &acts[l], &delta, rows, need_input_grad);
                        if trainable.contains(&l) {
                            grads.layers.insert(l, g);
                        }
                        delta = d;
                    }
                }
            }
        }
        Ok((loss, grads))
    }

    pub fn predict(&self, inputs: &[f64], in_dim: usize) -> Result<Vec<usize>, NnError> {
        let logits = self.forward(inputs, in_dim)?;
        Ok(logits.chunks_exact(self.n_classes()).map(argmax).collect())
    }

    pub fn affine_mut(&mut self, slot: Slot) -> Option<&mut Affine> {
        match slot {
            Slot::Head => Some(&mut self.head),
            Slot::Layer(p) => match self.layers.get_mut(p) {
                Some(Layer::Affine(a)) => Some(a),
                _ => None,
            },
        }
    }
}

/// Returns (parameter gradient, gradient w.r.t. the layer input). The input
/// gradient is empty when not requested.
fn affine_backward(
    a: &Affine,
    x: &[f64],
    delta: &[f64],
    rows: usize,
    want_input: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (n_in, n_out) = (a.in_dim, a.out_dim);
    let mut g = vec![0.0; n_in * n_out + n_out];
    let mut dx = if want_input {
        vec![0.0; rows * n_in]
    } else {
        Vec::new()
    };
    let w = &a.params[..n_in * n_out];
    for r in 0..rows {
        let xr = &x[r * n_in..(r + 1) * n_in];
        let dr = &delta[r * n_out..(r + 1) * n_out];
        for o in 0..n_out {
            let d = dr[o];
            if d == 0.0 {
                continue;
            }
            g[n_in * n_out + o] += d;
            let grow = &mut g[o * n_in..(o + 1) * n_in];
            for i in (0..n_in).step_by(a.stride) {
                grow[i] += d * xr[i];
            }
            if want_input {
                let wrow = &w[o * n_in..(o + 1) * n_in];
                let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                for i in (0..n_in).step_by(a.stride) {
                    dxr[i] += d * wrow[i];
                }
            }
        }
    }
    (g, dx)
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

pub fn forward<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    lookup: &L,
    batch: &Batch,
) -> Result<Vec<f64>, NnError> {
    Network::from_path(path, lookup)?.forward(&batch.inputs, batch.in_dim)
}

pub fn loss_and_grads<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    lookup: &L,
    batch: &Batch,
    unfrozen: &BTreeSet<usize>,
) -> Result<(f64, Gradients), NnError> {
    Network::from_path(path, lookup)?.loss_and_grads(batch, unfrozen)
}

/// Fraction of argmax-correct predictions over a split.
pub fn evaluate<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    lookup: &L,
    split: &Split,
) -> Result<f64, NnError> {
    if split.is_empty() {
        return Err(NnError::EmptySplit);
    }
    let net = Network::from_path(path, lookup)?;
    evaluate_network(&net, split)
}

pub fn evaluate_network(net: &Network, split: &Split) -> Result<f64, NnError> {
    if split.is_empty() {
        return Err(NnError::EmptySplit);
    }
    const CHUNK: usize = 256;
    let d = split.in_dim;
    let mut correct = 0usize;
    for start in (0..split.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(split.len());
        let preds = net.predict(&split.inputs[start * d..end * d], d)?;
        correct += preds
            .iter()
            .zip(&split.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Train the head and the `unfrozen` layer positions of `path` with SGD and
/// momentum. Returns new components for exactly those slots, tagged with
/// the path's task as their origin.
pub fn train_child<L: ComponentLookup + ?Sized>(
    path: &ModelPath,
    unfrozen: &BTreeSet<usize>,
    lookup: &L,
    train: &Split,
    budget: TrainBudget,
    seed: Seed,
) -> Result<TrainOutcome, NnError> {
    let hp = &path.hyperparams;
    let batch_size = hp.batch_size as usize;
    if budget.epochs == 0 {
        return Err(NnError::InvalidBudget("epochs must be at least 1".into()));
    }
    if (budget.samples_cap as usize) < batch_size {
        return Err(NnError::InvalidBudget(format!(
            "samples cap {} is below batch size {batch_size}",
            budget.samples_cap
        )));
    }
    if train.is_empty() {
        return Err(NnError::EmptySplit);
    }
    let per_epoch = budget.samples_per_epoch(train.len());
    let batches_per_epoch = per_epoch / batch_size;
    if batches_per_epoch == 0 {
        return Err(NnError::InvalidBudget(format!(
            "{per_epoch} samples per epoch cannot fill a batch of {batch_size}"
        )));
    }

    let mut net = Network::from_path(path, lookup)?;
    let slots: Vec<Slot> = unfrozen
        .iter()
        .map(|&p| Slot::Layer(p))
        .chain([Slot::Head])
        .collect();
    let mut velocity: BTreeMap<Slot, Vec<f64>> = BTreeMap::new();
    for &s in &slots {
        let a = net.affine_mut(s).ok_or(match s {
            Slot::Layer(p) => NnError::InvalidPosition(p),
            Slot::Head => NnError::InvalidPosition(path.component_ids.len()),
        })?;
        velocity.insert(s, vec![0.0; a.params.len()]);
    }

    let mut rng = seed.rng();
    let d = train.in_dim;
    let mut batch = Batch {
        in_dim: d,
        inputs: Vec::with_capacity(batch_size * d),
        labels: Vec::with_capacity(batch_size),
    };
    let mut steps = 0usize;
    let mut last_epoch_loss = 0.0;
    for _ in 0..budget.epochs {
        let order = epoch_order(train.len(), per_epoch, &mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks_exact(batch_size) {
            batch.inputs.clear();
            batch.labels.clear();
            for &i in chunk {
                batch
                    .inputs
                    .extend_from_slice(&train.inputs[i * d..(i + 1) * d]);
                batch.labels.push(train.labels[i]);
            }
            let (loss, grads) = net.loss_and_grads(&batch, unfrozen)?;
            if !loss.is_finite() {
                return Err(NnError::Diverged);
            }
            epoch_loss += loss;
            for (&slot, v) in velocity.iter_mut() {
                let g = match slot {
                    Slot::Head => &grads.head,
                    Slot::Layer(p) => &grads.layers[&p],
                };
                let a = net.affine_mut(slot).expect("slot checked above");
                for ((p, vi), gi) in a.params.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = hp.momentum * *vi - hp.learning_rate * gi;
                    *p += *vi;
                }
            }
            steps += 1;
        }
        last_epoch_loss = epoch_loss / batches_per_epoch as f64;
    }

    let task = Some(path.task_id.clone());
    let mut new_components = Vec::with_capacity(slots.len());
    for slot in slots {
        let (template, depth) = match slot {
            Slot::Layer(p) => (lookup.require(&path.component_ids[p])?, p as u32),
            Slot::Head => (
                lookup.require(&path.head_id)?,
                path.component_ids.len() as u32,
            ),
        };
        let a = net.affine_mut(slot).unwrap();
        let params: Vec<f32> = a.params.iter().map(|&p| p as f32).collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(NnError::Diverged);
        }
        let c = Component::new(
            template.kind(),
            template.in_dim(),
            template.out_dim(),
            params,
            task.clone(),
            depth,
        )?;
        new_components.push((slot, c));
    }
    Ok(TrainOutcome {
        new_components,
        final_train_loss: last_epoch_loss,
        steps_executed: steps,
    })
}

/// Sample order for one epoch: a fresh shuffle, repeated when the epoch needs
/// more samples than the split holds.
fn epoch_order(n: usize, wanted: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order = Vec::with_capacity(wanted);
    while order.len() < wanted {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        let take = (wanted - order.len()).min(n);
        order.extend_from_slice(&perm[..take]);
    }
    order
}

/// Glorot-uniform affine parameters with zero bias.
pub fn init_affine(in_dim: u32, out_dim: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
    let mut p: Vec<f32> = (0..in_dim * out_dim)
        .map(|_| rng.random_range(-limit..limit) as f32)
        .collect();
    p.extend(std::iter::repeat_n(0.0, out_dim as usize));
    p
}

/// Square layer close to the identity: `I + U(-gain, gain) / sqrt(width)`,
/// zero bias.
pub fn init_near_identity(width: u32, gain: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let w = width as usize;
    let scale = gain / (w as f64).sqrt();
    let mut p = Vec::with_capacity(w * w + w);
    for o in 0..w {
        for i in 0..w {
            let noise = if gain > 0.0 {
                rng.random_range(-scale..scale)
            } else {
                0.0
            };
            p.push((if o == i { 1.0 } else { 0.0 } + noise) as f32);
        }
    }
    p.extend(std::iter::repeat_n(0.0, w));
    p
}

/// A freshly initialized head for `task` on top of a `width`-wide stack.
pub fn fresh_head(width: u32, n_classes: u32, depth: u32, rng: &mut ChaCha8Rng) -> Component {
    Component::new(
        ComponentKind::Dense,
        width,
        n_classes,
        init_affine(width, n_classes, rng),
        None,
        depth,
    )
    .expect("glorot init is finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ComponentMap, HyperParams, InputResolution, MuTable, SearchSpace, TaskId};
    use std::sync::Arc;

    fn path_of(
        comps: &[&Component],
        head: &Component,
        hp: HyperParams,
    ) -> (ModelPath, ComponentMap) {
        let mut store = ComponentMap::new();
        for c in comps.iter().chain([&head]) {
            store.insert(c.id().clone(), Arc::new((*c).clone()));
        }
        let path = ModelPath {
            task_id: TaskId::new("toy").unwrap(),
            component_ids: comps.iter().map(|c| c.id().clone()).collect(),
            head_id: head.id().clone(),
            hyperparams: hp,
            mu: MuTable::default(),
            score: 0.0,
            val_accuracy: 0.0,
            test_accuracy: 0.0,
            generation_born: 0,
            parent_fingerprint: None,
        };
        (path, store)
    }

    fn identity(w: u32) -> Component {
        Component::new(
            ComponentKind::Dense,
            w,
            w,
            init_near_identity(w, 0.0, &mut Seed::new(0).rng()),
            None,
            0,
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let l = identity(2);
        let h = identity(2);
        let (path, store) = path_of(&[&l], &h, SearchSpace::default().midpoint());
        let batch = Batch {
            in_dim: 2,
            inputs: vec![1.0, 2.0],
            labels: vec![0],
        };
        assert_eq!(forward(&path, &store, &batch).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_give_zero_logits_and_uniform_loss() {
        let l = Component::new(ComponentKind::Dense, 3, 4, vec![0.0; 16], None, 0).unwrap();
        let h = Component::new(ComponentKind::Dense, 4, 5, vec![0.0; 25], None, 1).unwrap();
        let (path, store) = path_of(&[&l], &h, SearchSpace::default().midpoint());
        let batch = Batch {
            in_dim: 3,
            inputs: vec![0.3, -1.0, 2.0, 5.0, 1.0, 1.0],
            labels: vec![1, 4],
        };
        let logits = forward(&path, &store, &batch).unwrap();
        assert_eq!(logits.len(), 2 * 5);
        assert!(logits.iter().all(|&v| v == 0.0));
        let (loss, grads) = loss_and_grads(&path, &store, &batch, &BTreeSet::new()).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
        assert!(grads.layers.is_empty());
        assert_eq!(grads.head.len(), 25);
    }

    #[test]
    fn empty_batch_and_bad_positions_are_rejected() {
        let l = identity(2);
        let act = Component::activation(2, 1);
        let h = identity(2);
        let (path, store) = path_of(&[&l, &act], &h, SearchSpace::default().midpoint());
        let empty = Batch {
            in_dim: 2,
            inputs: vec![],
            labels: vec![],
        };
        assert_eq!(
            loss_and_grads(&path, &store, &empty, &BTreeSet::new()).unwrap_err(),
            NnError::EmptyBatch
        );
        let b = Batch {
            in_dim: 2,
            inputs: vec![1.0, 1.0],
            labels: vec![0],
        };
        assert_eq!(
            loss_and_grads(&path, &store, &b, &BTreeSet::from([1])).unwrap_err(),
            NnError::InvalidPosition(1)
        );
        let wrong = Batch {
            in_dim: 3,
            inputs: vec![1.0, 1.0, 1.0],
            labels: vec![0],
        };
        assert!(matches!(
            forward(&path, &store, &wrong),
            Err(NnError::DimMismatch { .. })
        ));
    }

    #[test]
    fn low_resolution_ignores_odd_features() {
        let mut rng = Seed::new(3).rng();
        let e = Component::new(
            ComponentKind::EmbeddingStub,
            4,
            3,
            init_affine(4, 3, &mut rng),
            None,
            0,
        )
        .unwrap();
        let h = Component::new(
            ComponentKind::Dense,
            3,
            2,
            init_affine(3, 2, &mut rng),
            None,
            1,
        )
        .unwrap();
        let mut hp = SearchSpace::default().midpoint();
        hp.input_resolution = InputResolution::Low;
        let (path, store) = path_of(&[&e], &h, hp);
        let a = Batch {
            in_dim: 4,
            inputs: vec![1.0, 5.0, -2.0, 7.0],
            labels: vec![0],
        };
        let b = Batch {
            in_dim: 4,
            inputs: vec![1.0, -9.0, -2.0, 0.0],
            labels: vec![0],
        };
        assert_eq!(
            forward(&path, &store, &a).unwrap(),
            forward(&path, &store, &b).unwrap()
        );
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn budget_step_count() {
        let b = TrainBudget {
            epochs: 4,
            samples_cap: 51200,
            fixed_samples: false,
        };
        assert_eq!(b.steps(100_000, 512), 400);
        assert_eq!(b.steps(1000, 512), 4);
        let fixed = TrainBudget {
            fixed_samples: true,
            ..b
        };
        assert_eq!(fixed.steps(1000, 512), 400);
    }
}
