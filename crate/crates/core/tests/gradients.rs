mod common;

use std::collections::BTreeSet;

use coevo::graph::InputResolution;
use coevo::nn::Network;
use coevo::rng::Seed;
use proptest::prelude::*;

#[test]
fn analytic_gradients_match_central_differences() {
    let r = common::gradient_check(11, 24, 8);
    assert!(r.coordinates >= 100, "only {} coordinates", r.coordinates);
    assert!(
        r.max_rel_err <= 1e-4,
        "max relative error {}",
        r.max_rel_err
    );
}

#[test]
fn frozen_layers_get_no_gradient() {
    let (path, lookup, batch) = common::random_network(Seed::new(3), 3, InputResolution::High);
    let net = Network::from_path(&path, &lookup).unwrap();
    let (_, g) = net.loss_and_grads(&batch, &BTreeSet::from([2])).unwrap();
    assert_eq!(g.layers.keys().copied().collect::<Vec<_>>(), vec![2]);
    assert!(!g.head.is_empty());
}

#[test]
fn loss_matches_with_and_without_gradients() {
    let (path, lookup, batch) = common::random_network(Seed::new(5), 2, InputResolution::Low);
    let net = Network::from_path(&path, &lookup).unwrap();
    let (l, _) = net.loss_and_grads(&batch, &BTreeSet::from([0, 2])).unwrap();
    assert!((l - net.loss(&batch).unwrap()).abs() <= 1e-12 * l.abs().max(1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gradient_check_holds_for_any_seed(seed in any::<u64>()) {
        let r = common::gradient_check(seed, 3, 6);
        prop_assert!(r.max_rel_err <= 1e-4, "max relative error {}", r.max_rel_err);
    }
}
