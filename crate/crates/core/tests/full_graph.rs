//! End-to-end gradient correctness: every trainable parameter of the
//! compressor + adapter graph against central finite differences, and
//! exact zero gradient on all frozen weights.

mod common;

#[test]
fn full_graph_gradients_match_finite_differences_over_10_seeds() {
    for seed in 0..10 {
        let (max_err, frozen_sum) = common::full_graph_max_rel_err(seed, 1e-5);
        assert!(max_err <= 1e-4, "seed {seed}: max rel err {max_err:.3e}");
        assert_eq!(frozen_sum, 0.0, "seed {seed}: frozen weights received gradient");
    }
}

#[test]
fn gradients_are_finite_and_replays_are_bit_identical() {
    let (a, _) = common::full_graph_max_rel_err(99, 1e-5);
    let (b, _) = common::full_graph_max_rel_err(99, 1e-5);
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), b.to_bits());
}
