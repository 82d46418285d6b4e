//! Finite-difference verification of analytic gradients for every op and
//! composite block, in 64-bit precision.

use semsynth::tensor::gradcheck::{grad_check, CheckInput};
use semsynth::verify;

#[test]
fn quadratic_closed_form() {
    // f(x) = sum(x^2) has gradient 2x
    let report = grad_check(
        "quadratic",
        |_, t| Ok(t[0].mul(&t[0])?.sum_all()),
        &[CheckInput::new("x", &[2], vec![1.0, 2.0])],
        1e-8,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{}", report.summary());
}

#[test]
fn full_suite_passes() {
    let start = std::time::Instant::now();
    let reports = verify::run_all().unwrap();
    assert!(reports.len() >= 35, "suite unexpectedly small: {}", reports.len());
    for r in &reports {
        assert!(r.passed, "{}", r.summary());
        assert!(r.max_relative_error < 1e-4, "{}", r.summary());
    }
    assert!(
        start.elapsed().as_secs() < 300,
        "gradient suite exceeded 5 minutes"
    );
}
