//! Finite-difference gradient verification for every differentiable
//! layer and the softmax + weighted cross-entropy composite.
//!
//! Each layer is probed on several random small tensors.  The scalar
//! probe differences an f64 reference forward (h = 1e-3, central), so
//! the comparison is not polluted by f32 accumulation noise, and the
//! reference forward itself is checked against the f32 implementation.
//! Partials that straddle a non-differentiable point (leaky-ReLU kink,
//! pooling tie) are excluded; the harness counts them and they must
//! stay rare.

mod common;

use common::OpCheck;

const SEEDS: std::ops::Range<u64> = 0..5;
const REL_TOL: f64 = 1e-3;

fn assert_all(name: &str, check: impl Fn(u64) -> OpCheck, forward_tol: f64) {
    for seed in SEEDS {
        let c = check(seed);
        assert!(
            c.worst_rel < REL_TOL,
            "{name} seed {seed}: rel error {:.3e} >= {REL_TOL:.0e}",
            c.worst_rel
        );
        assert!(
            c.forward_gap < forward_tol,
            "{name} seed {seed}: forward gap {:.3e} vs reference",
            c.forward_gap
        );
        assert!(c.checked > 0, "{name} seed {seed}: nothing checked");
        assert!(
            (c.masked as f64) < 0.05 * (c.masked + c.checked) as f64,
            "{name} seed {seed}: {} of {} partials masked at kinks",
            c.masked,
            c.masked + c.checked
        );
    }
}

#[test]
fn conv2d_matches_finite_differences() {
    assert_all("conv2d", common::gradcheck_conv2d, 1e-4);
}

#[test]
fn transposed_conv2d_matches_finite_differences() {
    assert_all("transposed_conv2d", common::gradcheck_transposed_conv2d, 1e-4);
}

#[test]
fn batch_norm_matches_finite_differences() {
    assert_all("batch_norm", common::gradcheck_batch_norm, 1e-4);
}

#[test]
fn leaky_relu_matches_finite_differences() {
    assert_all("leaky_relu", common::gradcheck_leaky_relu, 1e-6);
}

#[test]
fn max_pool2_matches_finite_differences() {
    assert_all("max_pool2", common::gradcheck_max_pool2, 1e-6);
}

#[test]
fn softmax_cross_entropy_matches_finite_differences() {
    assert_all("softmax+ce", common::gradcheck_softmax_ce, f64::INFINITY);
}

#[test]
fn resnet_block_matches_finite_differences() {
    assert_all("resnet_block", common::gradcheck_resnet_block, 5e-4);
}
