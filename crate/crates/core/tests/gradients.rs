mod common;

use common::{gradient_check, GRAD_TOLERANCE};

#[test]
fn analytic_gradients_match_central_differences() {
    let mut worst = (0.0, 0);
    let mut checked = 0;
    for seed in 0..200 {
        let r = gradient_check(seed);
        checked += r.checked;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, seed);
        }
    }
    assert!(checked > 1000, "only {checked} coordinates checked");
    assert!(worst.0 < GRAD_TOLERANCE, "max relative error {:.3e} at seed {}", worst.0, worst.1);
}

#[test]
fn kink_crossings_are_rare() {
    let (mut kinks, mut total) = (0, 0);
    for seed in 0..100 {
        let r = gradient_check(seed);
        kinks += r.kinks;
        total += r.kinks + r.checked;
    }
    assert!(kinks * 100 < total, "{kinks} of {total} coordinates skipped");
}
