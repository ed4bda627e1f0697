//! Backpropagation against central finite differences.

mod common;

#[test]
fn backprop_matches_finite_differences() {
    let (err, case) = common::gradient_sweep(40, 2024);
    assert!(err < 1e-5, "{case}: rel err {err:e}");
}
