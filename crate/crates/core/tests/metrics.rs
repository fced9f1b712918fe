mod common;

use std::collections::BTreeMap;

use coevo::coordinator::metrics::{compute_run_metrics, speedup_bound};
use coevo::coordinator::{run_sequential, Mode, RunRecord, TaskSource};
use coevo::graph::TaskId;

fn record(budgets: &[u64]) -> RunRecord {
    RunRecord {
        mode: Mode::Multiagent,
        processes: false,
        seed: 0,
        iterations: 1,
        tasks: Vec::new(),
        budgets: budgets
            .iter()
            .enumerate()
            .map(|(i, b)| (TaskId::new(format!("t{i}")).unwrap(), *b))
            .collect::<BTreeMap<_, _>>(),
        equal_budget: false,
        wall_time_s: 0.0,
    }
}

#[test]
fn speedup_bound_is_total_over_largest_budget() {
    assert_eq!(speedup_bound(&record(&[4, 1, 1, 2])), 2.0);
    assert_eq!(speedup_bound(&record(&[3; 8])), 8.0);
    assert_eq!(
        speedup_bound(&record(&[512, 128, 256, 256, 128, 512, 384, 128])),
        4.5
    );
}

#[test]
fn recorded_budgets_follow_train_sizes_and_the_cap() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = common::micro_config(3, 1, 0);
    if let TaskSource::Synthetic(f) = &mut cfg.tasks {
        f.train_sizes = Some(vec![32, 64, 200]);
    }
    cfg.agent.samples_cap = 128;
    cfg.agent.epochs = 2;
    let rec = run_sequential(&cfg, &tmp.path().join("prop")).unwrap();
    let budgets: Vec<u64> = rec.budgets.values().copied().collect();
    assert_eq!(budgets, vec![64, 128, 256]);
    assert_eq!(speedup_bound(&rec), 448.0 / 256.0);

    cfg.equal_budget = true;
    let rec = run_sequential(&cfg, &tmp.path().join("equal")).unwrap();
    assert!(rec.budgets.values().all(|b| *b == 256));
    assert_eq!(speedup_bound(&rec), 3.0);
}

#[test]
fn metrics_cover_every_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    run_sequential(&common::micro_config(2, 3, 1), &run).unwrap();
    let m = compute_run_metrics(&run).unwrap();
    assert_eq!(m.iterations.len(), 3);
    assert!(m
        .iterations
        .windows(2)
        .all(|w| w[0].wall_clock_s <= w[1].wall_clock_s));
    assert!(m.iterations.iter().all(|i| i.tasks_with_best == 2));
    assert!(m.agent_times.values().all(|t| t.len() == 3));
}
