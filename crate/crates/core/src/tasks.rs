//! Deterministic synthetic benchmark families and optional CSV ingestion.
//!
//! A family shares Gaussian class clusters in a latent space. Each task maps
//! latents to features through `tanh(W_t z + b_t)`, where
//! `W_t = r * W_base + (1 - r) * W_own(t)` interpolates between the family's
//! shared map and a task-private one (`r` is the relatedness), and relabels
//! classes with a task-specific permutation (identity for task 0).
//!
//! Random streams are ChaCha8 (`rand_chacha`) with fixed stream numbers:
//! stream 0 draws the family base, streams 1..=3 the train/val/test latents
//! (shared by every task, so splits are disjoint), and stream
//! `64 + 8 * task_index + k` the task-private draws. Features are
//! standardized with the train split's per-feature mean and variance.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{GraphError, TaskId, TaskInfo};

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Id(#[from] GraphError),
    #[error("csv {path}: {msg}")]
    Csv { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilySpec {
    pub family_seed: u64,
    pub n_tasks: usize,
    pub relatedness: f64,
    pub noise_level: f64,
    pub n_classes: u32,
    pub input_dim: u32,
    pub latent_dim: u32,
    pub class_separation: f64,
    /// Latent Gaussian clusters making up each class.
    pub clusters_per_class: u32,
    pub sizes: SplitSizes,
    /// Per-task train sizes overriding `sizes.train`.
    pub train_sizes: Option<Vec<usize>>,
    pub id_prefix: String,
}

impl Default for FamilySpec {
    fn default() -> Self {
        FamilySpec {
            family_seed: 1,
            n_tasks: 8,
            relatedness: 0.9,
            noise_level: 0.1,
            n_classes: 4,
            input_dim: 12,
            latent_dim: 6,
            class_separation: 1.5,
            clusters_per_class: 3,
            sizes: SplitSizes {
                train: 256,
                val: 128,
                test: 256,
            },
            train_sizes: None,
            id_prefix: "task".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: TaskId,
    pub family_seed: u64,
    pub task_index: usize,
    pub n_classes: u32,
    pub input_dim: u32,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    pub relatedness: f64,
    pub noise_level: f64,
}

impl TaskSpec {
    pub fn info(&self) -> TaskInfo {
        TaskInfo {
            input_dim: self.input_dim,
            n_classes: self.n_classes,
        }
    }
}

/// Row-major features and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub in_dim: usize,
    pub n_classes: usize,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.in_dim..(i + 1) * self.in_dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl TaskData {
    pub fn id(&self) -> &TaskId {
        &self.spec.task_id
    }
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn validate(spec: &FamilySpec) -> Result<(), TaskError> {
    let bad = |m: String| Err(TaskError::InvalidSpec(m));
    if spec.n_tasks == 0 {
        return bad("a family needs at least one task".into());
    }
    if !(0.0..=1.0).contains(&spec.relatedness) {
        return bad(format!("relatedness {} outside [0, 1]", spec.relatedness));
    }
    if !(spec.noise_level >= 0.0 && spec.noise_level.is_finite()) {
        return bad(format!(
            "noise level {} must be non-negative",
            spec.noise_level
        ));
    }
    if spec.input_dim == 0 || spec.latent_dim == 0 {
        return bad("input and latent dimensions must be positive".into());
    }
    if spec.clusters_per_class == 0 {
        return bad("clusters_per_class must be positive".into());
    }
    if spec.n_classes < 2 {
        return bad(format!("need at least 2 classes, got {}", spec.n_classes));
    }
    if let Some(ts) = &spec.train_sizes {
        if ts.len() != spec.n_tasks {
            return bad(format!(
                "{} train sizes for {} tasks",
                ts.len(),
                spec.n_tasks
            ));
        }
    }
    let trains = spec
        .train_sizes
        .clone()
        .unwrap_or_else(|| vec![spec.sizes.train; spec.n_tasks]);
    let smallest = trains
        .iter()
        .chain([&spec.sizes.val, &spec.sizes.test])
        .copied()
        .min()
        .unwrap();
    if smallest == 0 {
        return bad("empty split requested".into());
    }
    if spec.n_classes as usize > smallest {
        return bad(format!(
            "{} classes cannot all appear in a split of {smallest} samples",
            spec.n_classes
        ));
    }
    Ok(())
}

struct Family {
    centers: Vec<f64>,
    base_w: Vec<f64>,
    base_b: Vec<f64>,
}

/// Stratified latent samples: exact class balance, order shuffled.
fn latent_split(
    spec: &FamilySpec,
    fam: &Family,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> (Vec<f64>, Vec<usize>) {
    let k = spec.n_classes as usize;
    let l = spec.latent_dim as usize;
    let mut classes: Vec<usize> = (0..n).map(|i| i % k).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        classes.swap(i, j);
    }
    let m = spec.clusters_per_class as usize;
    let mut z = Vec::with_capacity(n * l);
    for &c in &classes {
        let cluster = c * m + rng.random_range(0..m);
        for j in 0..l {
            z.push(fam.centers[cluster * l + j] + gaussian(rng));
        }
    }
    (z, classes)
}

pub fn generate_family(spec: &FamilySpec) -> Result<Vec<TaskData>, TaskError> {
    validate(spec)?;
    let (k, l, d) = (
        spec.n_classes as usize,
        spec.latent_dim as usize,
        spec.input_dim as usize,
    );
    let map_scale = 1.0 / (l as f64).sqrt();

    let mut base = stream(spec.family_seed, 0);
    let m = spec.clusters_per_class as usize;
    let centers: Vec<f64> = (0..k * m * l)
        .map(|_| gaussian(&mut base) * spec.class_separation)
        .collect();
    let base_w: Vec<f64> = (0..d * l)
        .map(|_| gaussian(&mut base) * map_scale)
        .collect();
    let base_b: Vec<f64> = (0..d).map(|_| gaussian(&mut base) * 0.5).collect();
    let fam = Family {
        centers,
        base_w,
        base_b,
    };

    let trains = spec
        .train_sizes
        .clone()
        .unwrap_or_else(|| vec![spec.sizes.train; spec.n_tasks]);
    let r = spec.relatedness;
    let mut out = Vec::with_capacity(spec.n_tasks);
    for (t, &train_size) in trains.iter().enumerate() {
        let task_stream = |k: u64| stream(spec.family_seed, 64 + 8 * t as u64 + k);
        let mut own = task_stream(0);
        let own_w: Vec<f64> = (0..d * l).map(|_| gaussian(&mut own) * map_scale).collect();
        let own_b: Vec<f64> = (0..d).map(|_| gaussian(&mut own) * 0.5).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        if t > 0 {
            for i in (1..k).rev() {
                let j = own.random_range(0..=i);
                perm.swap(i, j);
            }
        }
        let w: Vec<f64> = fam
            .base_w
            .iter()
            .zip(&own_w)
            .map(|(a, b)| r * a + (1.0 - r) * b)
            .collect();
        let b: Vec<f64> = fam
            .base_b
            .iter()
            .zip(&own_b)
            .map(|(a, b)| r * a + (1.0 - r) * b)
            .collect();

        let make = |split_idx: u64, n: usize| {
            let mut lat = stream(spec.family_seed, split_idx);
            let (z, classes) = latent_split(spec, &fam, &mut lat, n);
            let mut noise = task_stream(split_idx);
            let mut x = Vec::with_capacity(n * d);
            for s in 0..n {
                let zs = &z[s * l..(s + 1) * l];
                for o in 0..d {
                    let pre: f64 = b[o]
                        + w[o * l..(o + 1) * l]
                            .iter()
                            .zip(zs)
                            .map(|(a, v)| a * v)
                            .sum::<f64>();
                    let eps = if spec.noise_level > 0.0 {
                        spec.noise_level * gaussian(&mut noise)
                    } else {
                        0.0
                    };
                    x.push(pre.tanh() + eps);
                }
            }
            let labels = classes.iter().map(|&c| perm[c]).collect();
            Split {
                in_dim: d,
                n_classes: k,
                inputs: x,
                labels,
            }
        };
        let mut train = make(1, train_size);
        let mut val = make(2, spec.sizes.val);
        let mut test = make(3, spec.sizes.test);
        let (mean, var) = feature_moments(&train);
        for s in [&mut train, &mut val, &mut test] {
            standardize(s, &mean, &var);
        }
        let task_id = TaskId::new(format!("{}{:02}", spec.id_prefix, t))?;
        out.push(TaskData {
            spec: TaskSpec {
                task_id,
                family_seed: spec.family_seed,
                task_index: t,
                n_classes: spec.n_classes,
                input_dim: spec.input_dim,
                train_size,
                val_size: spec.sizes.val,
                test_size: spec.sizes.test,
                relatedness: r,
                noise_level: spec.noise_level,
            },
            train,
            val,
            test,
        });
    }
    Ok(out)
}

fn feature_moments(s: &Split) -> (Vec<f64>, Vec<f64>) {
    let d = s.in_dim;
    let n = s.len() as f64;
    let mut mean = vec![0.0; d];
    for i in 0..s.len() {
        for (m, x) in mean.iter_mut().zip(s.row(i)) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for i in 0..s.len() {
        for ((v, x), m) in var.iter_mut().zip(s.row(i)).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

fn standardize(s: &mut Split, mean: &[f64], var: &[f64]) {
    let d = s.in_dim;
    for (j, x) in s.inputs.iter_mut().enumerate() {
        let f = j % d;
        let sd = var[f].sqrt();
        *x = if sd > 0.0 { (*x - mean[f]) / sd } else { 0.0 };
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitStats {
    pub size: usize,
    pub class_counts: Vec<usize>,
    pub feature_mean: Vec<f64>,
    pub feature_var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub train: SplitStats,
    pub val: SplitStats,
    pub test: SplitStats,
}

fn split_stats(s: &Split) -> SplitStats {
    let mut class_counts = vec![0; s.n_classes];
    for &l in &s.labels {
        class_counts[l] += 1;
    }
    let (feature_mean, feature_var) = feature_moments(s);
    SplitStats {
        size: s.len(),
        class_counts,
        feature_mean,
        feature_var,
    }
}

pub fn dataset_stats(task: &TaskData) -> DatasetStats {
    DatasetStats {
        train: split_stats(&task.train),
        val: split_stats(&task.val),
        test: split_stats(&task.test),
    }
}

/// CSV locations for one externally supplied task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvTask {
    pub id: String,
    pub train: String,
    pub val: String,
    pub test: String,
}

fn read_csv_split(path: &Path) -> Result<(Vec<f64>, Vec<usize>, usize), TaskError> {
    let err = |msg: String| TaskError::Csv {
        path: path.display().to_string(),
        msg,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| err(e.to_string()))?.clone();
    let label_col = headers
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| err("no `label` column".into()))?;
    let d = headers.len() - 1;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        for (i, field) in rec.iter().enumerate() {
            if i == label_col {
                labels.push(
                    field
                        .trim()
                        .parse::<usize>()
                        .map_err(|e| err(format!("row {row} label: {e}")))?,
                );
            } else {
                let v: f64 = field
                    .trim()
                    .parse()
                    .map_err(|e| err(format!("row {row} col {i}: {e}")))?;
                if !v.is_finite() {
                    return Err(err(format!("row {row} col {i}: non-finite value")));
                }
                inputs.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(err("no rows".into()));
    }
    Ok((inputs, labels, d))
}

/// Load a task from three CSV files: a header row, a `label` column with
/// integer class indices and every other column a decimal feature.
pub fn load_csv_task(csv: &CsvTask, base_dir: &Path) -> Result<TaskData, TaskError> {
    let id = TaskId::new(csv.id.clone())?;
    let load = |p: &str| read_csv_split(&base_dir.join(p));
    let parts = [load(&csv.train)?, load(&csv.val)?, load(&csv.test)?];
    let d = parts[0].2;
    if parts.iter().any(|p| p.2 != d) {
        return Err(TaskError::InvalidSpec(format!(
            "task {id}: splits disagree on feature count"
        )));
    }
    let k = parts
        .iter()
        .flat_map(|p| p.1.iter())
        .max()
        .copied()
        .unwrap_or(0)
        + 1;
    if k < 2 {
        return Err(TaskError::InvalidSpec(format!(
            "task {id}: need at least 2 classes"
        )));
    }
    let [train, val, test] = parts.map(|(inputs, labels, _)| Split {
        in_dim: d,
        n_classes: k,
        inputs,
        labels,
    });
    Ok(TaskData {
        spec: TaskSpec {
            task_id: id,
            family_seed: 0,
            task_index: 0,
            n_classes: k as u32,
            input_dim: d as u32,
            train_size: train.len(),
            val_size: val.len(),
            test_size: test.len(),
            relatedness: 0.0,
            noise_level: 0.0,
        },
        train,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FamilySpec {
        FamilySpec {
            n_tasks: 3,
            sizes: SplitSizes {
                train: 1000,
                val: 100,
                test: 100,
            },
            ..FamilySpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_family(&small()).unwrap();
        let b = generate_family(&small()).unwrap();
        assert_eq!(a, b);
        let mut other = small();
        other.family_seed += 1;
        assert_ne!(generate_family(&other).unwrap()[0].train, a[0].train);
    }

    #[test]
    fn fully_related_noise_free_tasks_differ_only_by_labels() {
        let spec = FamilySpec {
            relatedness: 1.0,
            noise_level: 0.0,
            ..small()
        };
        let tasks = generate_family(&spec).unwrap();
        let k = spec.n_classes as usize;
        for t in &tasks[1..] {
            assert_eq!(t.train.inputs, tasks[0].train.inputs);
            assert_eq!(t.test.inputs, tasks[0].test.inputs);
            // A consistent relabeling maps task 0's labels onto task t's.
            let mut map = vec![None; k];
            for (a, b) in tasks[0].train.labels.iter().zip(&t.train.labels) {
                assert_eq!(*map[*a].get_or_insert(*b), *b);
            }
        }
    }

    #[test]
    fn classes_are_exactly_balanced() {
        let tasks = generate_family(&small()).unwrap();
        let stats = dataset_stats(&tasks[1]);
        assert_eq!(stats.train.class_counts, vec![250; 4]);
        assert_eq!(stats.val.class_counts, vec![25; 4]);
    }

    #[test]
    fn features_are_standardized() {
        let tasks = generate_family(&small()).unwrap();
        for t in &tasks {
            let s = dataset_stats(t);
            for (m, v) in s.train.feature_mean.iter().zip(&s.train.feature_var) {
                assert!(m.abs() < 1e-9);
                assert!((v - 1.0).abs() < 0.1, "variance {v}");
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let empty = FamilySpec {
            sizes: SplitSizes {
                train: 10,
                val: 0,
                test: 10,
            },
            ..small()
        };
        assert!(matches!(
            generate_family(&empty),
            Err(TaskError::InvalidSpec(_))
        ));
        let crowded = FamilySpec {
            n_classes: 20,
            sizes: SplitSizes {
                train: 100,
                val: 10,
                test: 10,
            },
            ..small()
        };
        assert!(matches!(
            generate_family(&crowded),
            Err(TaskError::InvalidSpec(_))
        ));
        let none = FamilySpec {
            n_tasks: 0,
            ..small()
        };
        assert!(generate_family(&none).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("tr.csv"),
            "f0,label,f1\n0.5,1,2\n-1,0,3.25\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("va.csv"), "f0,label,f1\n1,2,1\n").unwrap();
        std::fs::write(dir.path().join("te.csv"), "f0,label,f1\n0,0,0\n").unwrap();
        let t = load_csv_task(
            &CsvTask {
                id: "ext".into(),
                train: "tr.csv".into(),
                val: "va.csv".into(),
                test: "te.csv".into(),
            },
            dir.path(),
        )
        .unwrap();
        assert_eq!(t.spec.n_classes, 3);
        assert_eq!(t.train.inputs, vec![0.5, 2.0, -1.0, 3.25]);
        assert_eq!(t.train.labels, vec![1, 0]);
        std::fs::write(dir.path().join("bad.csv"), "f0,f1\n1,2\n").unwrap();
        let bad = CsvTask {
            id: "x".into(),
            train: "bad.csv".into(),
            val: "va.csv".into(),
            test: "te.csv".into(),
        };
        assert!(load_csv_task(&bad, dir.path()).is_err());
    }
}
