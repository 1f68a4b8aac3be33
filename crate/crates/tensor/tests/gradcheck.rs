use nmt_tensor::opcheck::check_all_ops;

#[test]
fn every_op_matches_central_differences() {
    let checks = check_all_ops(10).unwrap();
    assert!(checks.len() >= 30);
    for c in &checks {
        assert!(c.report.checked > 0, "{}", c.name);
        assert!(
            c.report.max_rel_error < 1e-4,
            "{}: rel error {} at {}",
            c.name,
            c.report.max_rel_error,
            c.report.worst
        );
    }
}
