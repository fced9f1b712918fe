mod common;

use std::sync::Arc;

use coevo::graph::{
    validate_path, Component, ComponentKind, MuTable, Overlay, SystemState, TaskId,
};
use coevo::mutation::{
    apply_mutations, legal_actions, sample_mutations, sample_parent, update_mu, Direction,
    HyperField, MutationAction, MutationConfig, MutationError, ParentKind,
};
use coevo::rng::Seed;
use proptest::prelude::*;

fn tid(i: usize) -> TaskId {
    TaskId::new(format!("t{i}")).unwrap()
}

/// Three tasks with bests grown from the root; task 1 owns a distinct
/// dense layer at position 2 so swaps are possible.
fn seeded_system() -> SystemState {
    let mut state = common::empty_system(3, 9);
    let cfg = MutationConfig::default();
    for i in 0..3 {
        let mut rng = Seed::new(1).with(i as u64).rng();
        let cand = sample_parent(&state, &tid(i), &cfg, &mut rng).unwrap();
        let mut path = cand.path;
        for c in cand.local.values() {
            state.insert_component(c.clone());
        }
        if i == 1 {
            let old = state.components[&path.component_ids[2]].clone();
            let params = old.params().iter().map(|p| p * 0.5).collect();
            let c = Component::new(
                ComponentKind::Dense,
                old.in_dim(),
                old.out_dim(),
                params,
                Some(tid(1)),
                2,
            )
            .unwrap();
            path.component_ids[2] = c.id().clone();
            state.insert_component(Arc::new(c));
        }
        path.score = 0.5;
        state.bests.insert(tid(i), path);
    }
    state
}

#[test]
fn own_parent_fraction_matches_q() {
    let state = seeded_system();
    let cfg = MutationConfig::default();
    let draws = 10_000;
    let own = (0..draws)
        .filter(|k| {
            let mut rng = Seed::new(2).with(*k).rng();
            sample_parent(&state, &tid(0), &cfg, &mut rng)
                .unwrap()
                .parent_kind
                == ParentKind::Own
        })
        .count();
    let frac = own as f64 / draws as f64;
    assert!(
        (frac - cfg.parent_own_prob).abs() <= 0.02,
        "own fraction {frac}"
    );
}

#[test]
fn cross_task_parents_are_reheaded_and_frozen() {
    let state = seeded_system();
    let cfg = MutationConfig::default();
    let mut seen = 0;
    for k in 0..200 {
        let mut rng = Seed::new(3).with(k).rng();
        let c = sample_parent(&state, &tid(0), &cfg, &mut rng).unwrap();
        if let ParentKind::CrossTask(src) = &c.parent_kind {
            seen += 1;
            assert_ne!(src, &tid(0));
            assert!(c.unfrozen.is_empty());
            assert_eq!(c.path.task_id, tid(0));
            assert_eq!(c.path.component_ids, state.bests[src].component_ids);
            assert!(c.local.contains_key(&c.path.head_id));
            assert_eq!(c.parent_fingerprint, Some(state.bests[src].fingerprint()));
        }
    }
    assert!(seen > 50);
}

#[test]
fn lone_task_always_uses_its_own_lineage() {
    let mut state = common::empty_system(1, 4);
    let cfg = MutationConfig::default();
    let mut rng = Seed::new(0).rng();
    assert_eq!(
        sample_parent(&state, &tid(0), &cfg, &mut rng)
            .unwrap()
            .parent_kind,
        ParentKind::Root
    );
    let c = sample_parent(&state, &tid(0), &cfg, &mut rng).unwrap();
    for x in c.local.values() {
        state.insert_component(x.clone());
    }
    state.bests.insert(tid(0), c.path);
    for k in 0..100 {
        let mut rng = Seed::new(5).with(k).rng();
        assert_eq!(
            sample_parent(&state, &tid(0), &cfg, &mut rng)
                .unwrap()
                .parent_kind,
            ParentKind::Own
        );
    }
    assert!(matches!(
        sample_parent(&state, &TaskId::new("nope").unwrap(), &cfg, &mut rng),
        Err(MutationError::UnknownTask(_))
    ));
}

#[test]
fn inclusion_frequency_follows_mu() {
    let state = seeded_system();
    let cfg = MutationConfig::default();
    let mut parent = state.bests[&tid(0)].clone();
    parent.mu = MuTable([("clone@0".to_string(), cfg.p_min)].into());
    let draws = 10_000;
    let hits = (0..draws)
        .filter(|k| {
            let mut rng = Seed::new(6).with(*k).rng();
            sample_mutations(&parent, &state, &state, &cfg, &mut rng)
                .contains(&MutationAction::CloneLayer(0))
        })
        .count();
    let frac = hits as f64 / draws as f64;
    assert!((frac - 0.05).abs() <= 0.01, "inclusion {frac}");
}

#[test]
fn conflicting_sets_are_rejected() {
    let state = seeded_system();
    let cfg = MutationConfig::default();
    let mut rng = Seed::new(7).rng();
    let own = |rng: &mut _| loop {
        let c = sample_parent(&state, &tid(0), &cfg, rng).unwrap();
        if c.parent_kind == ParentKind::Own {
            break c;
        }
    };
    let p = own(&mut rng);
    let bad = [
        vec![MutationAction::CloneLayer(99)],
        vec![
            MutationAction::HyperparamStep(HyperField::Momentum, Direction::Up),
            MutationAction::HyperparamStep(HyperField::Momentum, Direction::Down),
        ],
        vec![MutationAction::CloneLayer(1)],
    ];
    for actions in bad {
        let r = apply_mutations(p.clone(), &actions, &state, &cfg, &mut rng);
        assert!(
            matches!(r, Err(MutationError::IllegalMutation { .. })),
            "{actions:?}"
        );
    }
    let grown =
        apply_mutations(p, &[MutationAction::AddLayerOnTop], &state, &cfg, &mut rng).unwrap();
    let mut grown_state = state.clone();
    for c in grown.local.values() {
        grown_state.insert_component(c.clone());
    }
    let r = apply_mutations(
        grown.clone(),
        &[
            MutationAction::RemoveTopLayer,
            MutationAction::AddLayerOnTop,
        ],
        &grown_state,
        &cfg,
        &mut rng,
    );
    assert!(matches!(r, Err(MutationError::IllegalMutation { .. })));
}

#[test]
fn swap_takes_a_sibling_component_at_the_same_depth() {
    let state = seeded_system();
    let cfg = MutationConfig::default();
    let parent = state.bests[&tid(0)].clone();
    assert!(legal_actions(&parent, &state, &state).contains(&MutationAction::SwapTransferSource(2)));
    let mut rng = Seed::new(8).rng();
    let cand = loop {
        let c = sample_parent(&state, &tid(0), &cfg, &mut rng).unwrap();
        if c.parent_kind == ParentKind::Own {
            break c;
        }
    };
    let child = apply_mutations(
        cand,
        &[MutationAction::SwapTransferSource(2)],
        &state,
        &cfg,
        &mut rng,
    )
    .unwrap();
    assert_eq!(
        child.path.component_ids[2],
        state.bests[&tid(1)].component_ids[2]
    );
    assert!(child.unfrozen.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn sampled_mutations_always_apply_to_a_valid_child(seed in any::<u64>(), task in 0usize..3, steps in 1usize..6) {
        let mut state = seeded_system();
        let cfg = MutationConfig::default();
        let mut rng = Seed::new(seed).rng();
        for _ in 0..steps {
            let parent = sample_parent(&state, &tid(task), &cfg, &mut rng).unwrap();
            let before: Vec<_> = state.components.keys().cloned().collect();
            let actions = {
                let lookup = Overlay { base: &state, local: &parent.local };
                sample_mutations(&parent.path, &state, &lookup, &cfg, &mut rng)
            };
            let child = apply_mutations(parent, &actions, &state, &cfg, &mut rng).unwrap();
            let lookup = Overlay { base: &state, local: &child.local };
            prop_assert!(validate_path(&child.path, &state, &lookup).is_ok());
            prop_assert!(child.applied.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(child.unfrozen.iter().all(|&p| p < child.path.component_ids.len()));
            for p in &child.unfrozen {
                let c = lookup.local.get(&child.path.component_ids[*p]).or_else(|| state.components.get(&child.path.component_ids[*p]));
                prop_assert!(c.is_some_and(|c| c.kind().is_trainable()));
            }
            for (d, p) in &child.path.mu.0 {
                prop_assert!((0.0..=1.0).contains(p), "{d} = {p}");
            }
            prop_assert_eq!(before, state.components.keys().cloned().collect::<Vec<_>>());
            for c in child.local.values() {
                state.insert_component(c.clone());
            }
            state.bests.insert(tid(task), child.path);
        }
    }

    #[test]
    fn mu_update_stays_within_bounds(seed in any::<u64>(), wins in 1usize..40) {
        let cfg = MutationConfig::default();
        let all = [
            MutationAction::CloneLayer(0),
            MutationAction::CloneLayer(2),
            MutationAction::AddLayerOnTop,
            MutationAction::HyperparamStep(HyperField::LearningRate, Direction::Up),
        ];
        let mut rng = Seed::new(seed).rng();
        let mut mu = MuTable::default();
        for _ in 0..wins {
            let applied: Vec<_> = all.iter().filter(|_| rand::Rng::random::<bool>(&mut rng)).cloned().collect();
            mu = update_mu(&mu, &applied, true, &cfg);
            for p in mu.0.values() {
                prop_assert!(*p >= cfg.p_min - 1e-12 && *p <= cfg.p_max + 1e-12);
            }
        }
        prop_assert_eq!(update_mu(&mu, &all, false, &cfg), mu);
    }
}
