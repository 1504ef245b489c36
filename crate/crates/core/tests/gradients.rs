//! Analytic gradients against central finite differences.

mod common;

use common::{gradient_errors, gradient_instance};

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..20 {
        let errs = gradient_errors(&gradient_instance(seed));
        assert!(errs.max() <= 1e-4, "seed {seed}: {errs:?}");
    }
}
