//! Per-iteration metrics reconstructed after a run from the store's best
//! history, the event logs and the agents' timings.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{load_timings, read_json, store_dir, CoordinatorError, ExperimentConfig, RunRecord};
use crate::evolution::{EventKind, EventLog};
use crate::graph::{
    accounted_parameters_with, inference_flops, share_counts, AgentId, ComponentMap, ModelPath,
    TaskId,
};
use crate::store::Store;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub wall_clock_s: f64,
    pub mean_val_acc: f64,
    pub mean_test_acc: f64,
    pub mean_acc_params: f64,
    pub mean_flops: f64,
    pub tasks_with_best: usize,
}

/// Mean clone probability of layers at one depth over the bests holding a
/// trainable layer there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuDepth {
    pub iteration: u64,
    pub depth: usize,
    pub mean_clone_prob: f64,
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperCount {
    pub iteration: u64,
    pub field: String,
    pub value: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub record: RunRecord,
    pub iterations: Vec<IterationMetrics>,
    pub mu_by_depth: Vec<MuDepth>,
    pub hyperparams: Vec<HyperCount>,
    /// Task-iteration wall times per agent, indexed by iteration.
    pub agent_times: BTreeMap<AgentId, Vec<f64>>,
}

/// Every task's best as of the end of iteration `n`.
pub fn bests_at(store: &Store, n: u64) -> Result<BTreeMap<TaskId, ModelPath>, CoordinatorError> {
    let mut out = BTreeMap::new();
    for t in store.manifest().tasks.keys() {
        if let Some((_, rec)) = store.best_before(t, n + 1)? {
            out.insert(t.clone(), rec.path);
        }
    }
    Ok(out)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Elapsed seconds from the first start event to the last completion of
/// each iteration.
fn wall_clock(
    run_dir: &Path,
    agents: &[AgentId],
    iterations: u64,
) -> Result<Vec<f64>, CoordinatorError> {
    let mut first = u128::MAX;
    let mut done = vec![0u128; iterations as usize];
    for a in agents {
        let path = run_dir.join("events").join(format!("{a}.jsonl"));
        for e in EventLog::read(&path)? {
            match e.event {
                EventKind::Start => first = first.min(e.unix_ns),
                EventKind::Complete => {
                    if let Some(d) = done.get_mut(e.iteration as usize) {
                        *d = (*d).max(e.unix_ns);
                    }
                }
            }
        }
    }
    let mut out = Vec::with_capacity(done.len());
    let mut last = 0.0;
    for d in done {
        if d >= first && first != u128::MAX {
            last = (d - first) as f64 / 1e9;
        }
        out.push(last);
    }
    Ok(out)
}

pub fn compute_run_metrics(run_dir: &Path) -> Result<RunMetrics, CoordinatorError> {
    let record: RunRecord = read_json(&run_dir.join("record.json"))?;
    let cfg: ExperimentConfig = read_json(&run_dir.join("config.json"))?;
    let store = Store::open(&store_dir(run_dir))?;
    let agents = store.manifest().agents.clone();
    let p_init = cfg.agent.mutation.p_init;
    let clock = wall_clock(run_dir, &agents, record.iterations)?;

    let mut components = ComponentMap::new();
    let mut iterations = Vec::new();
    let mut mu_by_depth = Vec::new();
    let mut hyperparams = Vec::new();
    for n in 0..record.iterations {
        let bests = bests_at(&store, n)?;
        for p in bests.values() {
            for id in p.all_ids() {
                if !components.contains_key(id) {
                    components.insert(id.clone(), Arc::new(store.read_component(id)?));
                }
            }
        }
        let counts = share_counts(bests.values());
        let mut params = Vec::new();
        let mut flops = Vec::new();
        for p in bests.values() {
            params.push(
                accounted_parameters_with(p, &components, &counts)
                    .map_err(crate::store::StoreError::from)?,
            );
            flops.push(inference_flops(p, &components).map_err(crate::store::StoreError::from)?);
        }
        iterations.push(IterationMetrics {
            iteration: n,
            wall_clock_s: clock[n as usize],
            mean_val_acc: mean(bests.values().map(|p| p.val_accuracy)),
            mean_test_acc: mean(bests.values().map(|p| p.test_accuracy)),
            mean_acc_params: mean(params.into_iter()),
            mean_flops: mean(flops.into_iter()),
            tasks_with_best: bests.len(),
        });

        let mut by_depth: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for p in bests.values() {
            for (d, id) in p.component_ids.iter().enumerate() {
                if components[id].kind().is_trainable() {
                    by_depth
                        .entry(d)
                        .or_default()
                        .push(p.mu.get_or(&format!("clone@{d}"), p_init));
                }
            }
        }
        for (depth, probs) in by_depth {
            mu_by_depth.push(MuDepth {
                iteration: n,
                depth,
                paths: probs.len(),
                mean_clone_prob: mean(probs.into_iter()),
            });
        }

        let mut counts: BTreeMap<(&'static str, String), usize> = BTreeMap::new();
        for p in bests.values() {
            let hp = &p.hyperparams;
            for (field, value) in [
                ("learning_rate", hp.learning_rate.to_string()),
                ("momentum", hp.momentum.to_string()),
                ("batch_size", hp.batch_size.to_string()),
                (
                    "input_resolution",
                    format!("{:?}", hp.input_resolution).to_lowercase(),
                ),
            ] {
                *counts.entry((field, value)).or_insert(0) += 1;
            }
        }
        for ((field, value), count) in counts {
            hyperparams.push(HyperCount {
                iteration: n,
                field: field.into(),
                value,
                count,
            });
        }
    }

    let mut agent_times = BTreeMap::new();
    for a in &agents {
        let times: Vec<f64> = load_timings(run_dir, a)?
            .iter()
            .map(|r| r.wall_time_s)
            .collect();
        agent_times.insert(a.clone(), times);
    }
    Ok(RunMetrics {
        record,
        iterations,
        mu_by_depth,
        hyperparams,
        agent_times,
    })
}

/// Speedup of a multiagent run over a sequential one: per iteration, the
/// sequential task-set time over the slowest agent's task-iteration time,
/// then averaged over iterations.
pub fn speedup(
    sequential: &RunMetrics,
    multiagent: &RunMetrics,
) -> Result<(f64, Vec<f64>), CoordinatorError> {
    let n = sequential
        .record
        .iterations
        .min(multiagent.record.iterations) as usize;
    let mut per_iter = Vec::with_capacity(n);
    for i in 0..n {
        let seq: f64 = sequential
            .agent_times
            .values()
            .map(|t| t.get(i).copied().unwrap_or(0.0))
            .sum();
        let slow = multiagent
            .agent_times
            .values()
            .map(|t| t.get(i).copied().unwrap_or(0.0))
            .fold(0.0, f64::max);
        if slow <= 0.0 {
            return Err(CoordinatorError::Report(format!(
                "iteration {i} has no multiagent timing"
            )));
        }
        per_iter.push(seq / slow);
    }
    Ok((mean(per_iter.iter().copied()), per_iter))
}

/// Upper bound on agent-parallel speedup: total budget over the largest.
pub fn speedup_bound(record: &RunRecord) -> f64 {
    let total: u64 = record.budgets.values().sum();
    let max = record.budgets.values().copied().max().unwrap_or(1).max(1);
    total as f64 / max as f64
}
