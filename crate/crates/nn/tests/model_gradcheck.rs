//! Finite-difference checks of the full model blocks at tiny sizes.

use smv4d_nn::gradcheck;

#[test]
fn mjd_block_gradients_match_finite_differences() {
    let report = gradcheck::grad_check("mjd_block").unwrap();
    assert!(
        report.passed,
        "mjd_block: max rel err {} over tolerance {}",
        report.max_rel_err, report.tolerance
    );
}

#[test]
fn dpa_block_gradients_match_finite_differences() {
    let report = gradcheck::grad_check("dpa_block").unwrap();
    assert!(
        report.passed,
        "dpa_block: max rel err {} over tolerance {}",
        report.max_rel_err, report.tolerance
    );
}
