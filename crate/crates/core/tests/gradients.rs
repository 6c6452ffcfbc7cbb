#[path = "common/checks.rs"]
mod checks;

#[test]
fn analytic_gradients_match_central_differences() {
    let s = checks::gradient_suite(100, 0);
    assert!(s.fuse <= 1e-4, "fusion: {:e}", s.fuse);
    assert!(s.predictive <= 1e-4, "predictive loss: {:e}", s.predictive);
    assert!(s.objective <= 1e-4, "full objective: {:e}", s.objective);
}
