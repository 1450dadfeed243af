mod common {
    pub mod grad_suite;
}

use common::grad_suite::run_op_suite;

#[test]
fn every_op_passes_finite_differences() {
    for seed in [1, 2] {
        for (name, report) in run_op_suite(seed) {
            assert!(report.checked > 0, "{name} checked nothing");
            assert!(
                report.max_rel_error < 1e-4,
                "{name}: relative error {:e}",
                report.max_rel_error
            );
        }
    }
}
