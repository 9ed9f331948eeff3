mod common;

use cct_core::eval::pass_at_k;
use common::pass_at_k_enumerated;
use proptest::prelude::*;

#[test]
fn matches_subset_enumeration_for_small_n() {
    for n in 1..=10 {
        for c in 0..=n {
            for k in 1..=n {
                let got = pass_at_k(n, c, k).unwrap();
                let want = pass_at_k_enumerated(n, c, k);
                assert!((got - want).abs() <= 1e-12, "n={n} c={c} k={k}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn monotone_in_k_and_correct() {
    for n in 1..=10 {
        for c in 0..=n {
            for k in 1..n {
                assert!(pass_at_k(n, c, k + 1).unwrap() >= pass_at_k(n, c, k).unwrap());
            }
        }
        for k in 1..=n {
            for c in 0..n {
                assert!(pass_at_k(n, c + 1, k).unwrap() >= pass_at_k(n, c, k).unwrap());
            }
        }
    }
}

proptest! {
    /// For larger n the product form stays in [0, 1] and pass@1 is c/n.
    #[test]
    fn bounded_and_pass_at_one_is_fraction(n in 1usize..500, c_frac in 0.0f64..=1.0, k_frac in 0.0f64..=1.0) {
        let c = (c_frac * n as f64).floor() as usize;
        let k = 1 + ((n - 1) as f64 * k_frac).floor() as usize;
        let p = pass_at_k(n, c, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((pass_at_k(n, c, 1).unwrap() - c as f64 / n as f64).abs() < 1e-12);
    }
}
