//! Transfer check for benchmark families: does a model trained on a sibling
//! task give a better starting point than the root, at equal budget?

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coordinator::{build_root, RootSpec};
use crate::graph::{ComponentMap, HyperParams, InputResolution, ModelPath, MuTable};
use crate::nn::{evaluate, fresh_head, train_child, NnError, TrainBudget};
use crate::rng::Seed;
use crate::tasks::TaskData;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferCheck {
    pub root: RootSpec,
    pub hyperparams: HyperParams,
    /// Budget of each child trained on the target task.
    pub budget: TrainBudget,
    /// Budget used to train the source model before transfer.
    pub source_budget: TrainBudget,
    pub trials: u32,
    pub seed: u64,
}

/// Trials of the gate every default benchmark family must pass.
pub const GATE_TRIALS: u32 = 20;
/// Minimum transfer wins out of `GATE_TRIALS`.
pub const GATE_MIN_WINS: usize = 16;

impl TransferCheck {
    /// The frozen gate configuration: a small root, a short target budget
    /// and a source model trained ten times longer.
    pub fn gate(seed: u64) -> Self {
        TransferCheck {
            root: RootSpec {
                hidden: 16,
                blocks: 1,
            },
            hyperparams: HyperParams {
                learning_rate: 0.1,
                momentum: 0.9,
                batch_size: 32,
                epochs: 2,
                input_resolution: InputResolution::High,
            },
            budget: TrainBudget {
                epochs: 2,
                samples_cap: 128,
                fixed_samples: false,
            },
            source_budget: TrainBudget {
                epochs: 20,
                samples_cap: 512,
                fixed_samples: false,
            },
            trials: GATE_TRIALS,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: u32,
    pub source: usize,
    pub target: usize,
    pub transfer_val_acc: f64,
    pub root_val_acc: f64,
}

impl TrialOutcome {
    pub fn transfer_wins(&self) -> bool {
        self.transfer_val_acc > self.root_val_acc
    }
}

/// Train every layer and a fresh head of `ids` on `task`.
fn train_full(
    ids: &[crate::graph::ComponentId],
    lookup: &mut ComponentMap,
    task: &TaskData,
    check: &TransferCheck,
    budget: TrainBudget,
    seed: Seed,
) -> Result<ModelPath, NnError> {
    let width = lookup[ids.last().expect("non-empty stack")].out_dim();
    let head = fresh_head(
        width,
        task.spec.n_classes,
        ids.len() as u32,
        &mut seed.with_str("head").rng(),
    );
    let path = ModelPath {
        task_id: task.id().clone(),
        component_ids: ids.to_vec(),
        head_id: head.id().clone(),
        hyperparams: check.hyperparams.clone(),
        mu: MuTable::default(),
        score: 0.0,
        val_accuracy: 0.0,
        test_accuracy: 0.0,
        generation_born: 0,
        parent_fingerprint: None,
    };
    lookup.insert(head.id().clone(), Arc::new(head));
    let trainable: BTreeSet<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, id)| lookup[*id].kind().is_trainable())
        .map(|(i, _)| i)
        .collect();
    let outcome = train_child(
        &path,
        &trainable,
        lookup,
        &task.train,
        budget,
        seed.with_str("train"),
    )?;
    for (_, c) in &outcome.new_components {
        lookup.insert(c.id().clone(), Arc::new(c.clone()));
    }
    let mut trained = outcome.apply_to(&path);
    trained.val_accuracy = evaluate(&trained, lookup, &task.val)?;
    Ok(trained)
}

/// One trial: a source/target sibling pair picked from `trial`, a fresh
/// root, then the target trained from the root versus from the source's
/// trained layers, both with the same budget on the target.
pub fn transfer_trial(
    tasks: &[TaskData],
    check: &TransferCheck,
    trial: u32,
) -> Result<TrialOutcome, NnError> {
    let n = tasks.len();
    assert!(n >= 2, "a transfer trial needs two tasks");
    let source = trial as usize % n;
    let target = (source + 1 + (trial as usize / n) % (n - 1)) % n;
    let seed = Seed::new(check.seed).with(trial as u64);
    let root = build_root(
        check.root,
        tasks[0].spec.input_dim,
        seed.with_str("root").value(),
    );
    let mut lookup: ComponentMap = root
        .iter()
        .map(|c| (c.id().clone(), Arc::new(c.clone())))
        .collect();
    let root_ids: Vec<_> = root.iter().map(|c| c.id().clone()).collect();

    let from_root = train_full(
        &root_ids,
        &mut lookup,
        &tasks[target],
        check,
        check.budget,
        seed.with_str("target"),
    )?;
    let src = train_full(
        &root_ids,
        &mut lookup,
        &tasks[source],
        check,
        check.source_budget,
        seed.with_str("source"),
    )?;
    let transferred = train_full(
        &src.component_ids,
        &mut lookup,
        &tasks[target],
        check,
        check.budget,
        seed.with_str("target"),
    )?;
    Ok(TrialOutcome {
        trial,
        source,
        target,
        transfer_val_acc: transferred.val_accuracy,
        root_val_acc: from_root.val_accuracy,
    })
}

pub fn run_transfer_check(
    tasks: &[TaskData],
    check: &TransferCheck,
) -> Result<Vec<TrialOutcome>, NnError> {
    (0..check.trials)
        .map(|t| transfer_trial(tasks, check, t))
        .collect()
}
