use cdkd_harness::gradsuite::{run_suite, GRAD_TOL, SEEDS, SHAPES};

#[test]
fn every_case_passes_on_every_shape_and_seed() {
    let report = run_suite().unwrap();
    let names = report.names();
    for expected in ["matmul", "conv2d", "softmax", "grad_reverse", "feature_loss", "sape_feature_loss", "logit_loss/tau", "total_loss"] {
        assert!(names.contains(&expected), "{expected} missing from {names:?}");
    }
    assert_eq!(report.cases.len(), names.len() * SHAPES.len() * SEEDS.len());
    let failures: Vec<_> = report.failures().collect();
    assert!(failures.is_empty(), "{failures:#?}");
    assert!(report.max_error() < GRAD_TOL);
}
