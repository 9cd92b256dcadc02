mod common;

use std::time::Instant;

#[test]
fn every_operation_matches_finite_differences() {
    let start = Instant::now();
    for seed in [1, 2, 3, 4, 5] {
        let results = common::gradient_suite(seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
        assert_eq!(results.len(), 12);
    }
    assert!(start.elapsed().as_secs_f64() < 30.0);
}

#[test]
fn confident_supervision_implies_flip_consistency() {
    let worst = common::implication_suite(100, 11).unwrap();
    assert!(worst < 2e-3);
}
