use proptest::prelude::*;

use super::*;
use crate::model::{NSystemParams, OneSidedState, SystemKind, Truncation, TwoSidedState};

fn reference() -> NSystemParams {
    NSystemParams::new(1.0, 1.0, 2.0, 2.0, 1.0, 1.0).unwrap()
}

fn no_reneging() -> NSystemParams {
    NSystemParams::new(1.0, 1.0, 2.0, 2.0, 0.0, 0.0).unwrap()
}

fn s(m: usize, n: usize) -> OneSidedState {
    OneSidedState::new(m, n)
}

fn close(x: f64, y: f64, rel: f64) -> bool {
    (x - y).abs() <= rel * y.abs().max(f64::MIN_POSITIVE)
}

#[test]
fn f_and_g_small_values() {
    let p = reference();
    assert_eq!(f_known(&p, 0), 1.0);
    assert!(close(f_known(&p, 1), 1.0 / 3.0, 1e-15));
    // f(1)(1−γs) + (1−γs)² = f(2)(a + 2b) with a = 1, b = 0.5.
    let f2 = (f_known(&p, 1) * 0.5 + 0.25) / 2.0;
    assert!(close(f_known(&p, 2), f2, 1e-14));
    assert!(close(f2, 5.0 / 24.0, 1e-15));
    assert_eq!(g_total(&p, 0), 1.0);
    assert!(close(g_total(&p, 1), 0.4, 1e-15));
    assert!(close(g_total(&no_reneging(), 3), 0.125, 1e-15));
}

#[test]
fn decomposition_table() {
    let p = reference();
    let fg = FGDecomposition::new(&p, 5, 10);
    assert_eq!(fg.f_values[0], 1.0);
    assert_eq!(fg.g_values[0], 1.0);
    assert_eq!((fg.a, fg.b), (1.0, 0.5));
    for k in 1..=10 {
        let ratio = fg.g_values[k] / fg.g_values[k - 1];
        assert!(close(ratio, 2.0 / (4.0 + k as f64), 1e-14));
    }
    let w = fg.weight(s(2, 3)).unwrap();
    assert!(close(w, unnormalized_weight_one_sided(&p, s(2, 3)).unwrap(), 1e-12));
    assert_eq!(fg.weight(s(6, 0)), None);
}

#[test]
fn one_sided_weights() {
    let p = reference();
    assert_eq!(unnormalized_weight_one_sided(&p, s(0, 0)).unwrap(), 1.0);
    assert!(close(unnormalized_weight_one_sided(&p, s(0, 1)).unwrap(), 0.4, 1e-15));
    assert!(close(unnormalized_weight_one_sided(&p, s(1, 0)).unwrap(), 2.0 / 15.0, 1e-15));
    assert!(close(alternative_form_weight(&p, s(1, 0)).unwrap(), 2.0 / 15.0, 1e-15));
    assert_eq!(alternative_form_weight(&p, s(0, 0)).unwrap(), 1.0);
}

#[test]
fn forms_agree_on_a_grid() {
    let sets = [
        reference(),
        NSystemParams::new(2.0, 0.5, 1.0, 3.0, 0.3, 0.0).unwrap(),
        NSystemParams::new(0.2, 3.0, 0.7, 1.1, 2.5, 0.0).unwrap(),
        NSystemParams::new(5.0, 5.0, 0.5, 0.5, 0.05, 0.0).unwrap(),
        NSystemParams::new(1.0, 0.4, 2.0, 2.0, 0.0, 0.0).unwrap(),
    ];
    for p in sets {
        for m in 0..=30 {
            for n in 0..=30 {
                assert!(forms_relative_gap(&p, s(m, n)) < 1e-12, "{p:?} ({m},{n})");
            }
        }
    }
}

#[test]
fn no_reneging_closed_form() {
    let p = no_reneging();
    assert!(close(no_reneging_normalizer(&p).unwrap(), 1.0 / 3.0, 1e-15));
    assert!(close(no_reneging_distribution(&p, s(0, 1)).unwrap(), 1.0 / 6.0, 1e-15));
    let total: f64 = (0..200)
        .flat_map(|m| (0..200).map(move |n| (m, n)))
        .map(|(m, n)| no_reneging_distribution(&p, s(m, n)).unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-10);
}

#[test]
fn reneging_limit_reproduces_closed_form() {
    let p = no_reneging();
    let b = no_reneging_normalizer(&p).unwrap();
    for m in 0..=50 {
        for n in 0..=50 {
            let w = unnormalized_weight_one_sided(&p, s(m, n)).unwrap() * b;
            assert!(close(w, no_reneging_distribution(&p, s(m, n)).unwrap(), 1e-12));
        }
    }
}

#[test]
fn rejections() {
    let unstable = NSystemParams::new(1.0, 2.5, 2.0, 2.0, 0.0, 0.0).unwrap();
    assert_eq!(
        unnormalized_weight_one_sided(&unstable, s(0, 1)),
        Err(ProductFormError::Divergent)
    );
    assert_eq!(
        normalize(&unstable, SystemKind::OneSided, 1e-10).unwrap_err(),
        ProductFormError::Divergent
    );
    assert_eq!(
        no_reneging_normalizer(&reference()),
        Err(ProductFormError::RenegingPresent)
    );
    let one_sided_only = NSystemParams::new(1.0, 1.0, 2.0, 2.0, 1.0, 0.0).unwrap();
    assert_eq!(
        unnormalized_weight_two_sided(&one_sided_only, TwoSidedState::Empty),
        Err(ProductFormError::TwoSidedNeedsReneging)
    );
    for tol in [0.0, -1.0, 1e-2, f64::NAN] {
        assert!(matches!(
            normalize(&reference(), SystemKind::OneSided, tol),
            Err(ProductFormError::BadTolerance(_))
        ));
    }
    // With reneging the same overloaded rates are fine.
    let renege = unstable.with_theta_s(0.5);
    assert!(normalize(&renege, SystemKind::OneSided, 1e-10).is_ok());
}

#[test]
fn two_sided_weights() {
    let p = reference();
    assert_eq!(unnormalized_weight_two_sided(&p, TwoSidedState::Empty).unwrap(), 1.0);
    let both = unnormalized_weight_two_sided(&p, TwoSidedState::both(1, 1).unwrap()).unwrap();
    assert!(close(both, 1.0 / 3.0, 1e-15));
    for m in 0..=15 {
        for n in 0..=15 {
            if m + n == 0 {
                continue;
            }
            let left = unnormalized_weight_two_sided(&p, TwoSidedState::left(m, n).unwrap());
            let one = unnormalized_weight_one_sided(&p, s(m, n));
            assert_eq!(left.unwrap(), one.unwrap());
        }
    }
}

#[test]
fn mirrored_parameters_swap_the_regimes() {
    let p = NSystemParams::new(0.7, 1.9, 1.3, 2.4, 0.6, 1.7).unwrap();
    let q = p.mirrored();
    for m in 0..=12 {
        for n in 0..=12 {
            if m + n == 0 {
                continue;
            }
            let right = ln_weight_two_sided(&p, TwoSidedState::right(m, n).unwrap());
            let left = ln_weight_two_sided(&q, TwoSidedState::left(m, n).unwrap());
            assert!((right - left).abs() < 1e-12, "({m},{n})");
        }
    }
    for i in 1..=8 {
        for j in 1..=8 {
            let a = ln_weight_two_sided(&p, TwoSidedState::both(i, j).unwrap());
            let b = ln_weight_two_sided(&q, TwoSidedState::both(j, i).unwrap());
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn geometric_ratio_decreases_in_n() {
    let p = reference();
    for m in 0..5 {
        let mut prev = f64::INFINITY;
        for n in 0..40 {
            let r = (ln_weight_one_sided(&p, s(m, n + 1)) - ln_weight_one_sided(&p, s(m, n))).exp();
            let expect = p.supply_rate() / (p.demand_rate() + (m + n + 1) as f64 * p.theta_s);
            assert!(close(r, expect, 1e-12));
            assert!(r < prev);
            prev = r;
        }
    }
}

#[test]
fn normalizer_without_reneging() {
    let d = normalize_one_sided(&no_reneging(), 1e-10).unwrap();
    assert!((d.normalizer - 1.0 / 3.0).abs() < 1e-10);
    assert!(d.tail_mass_bound < 1e-10);
    let mass = d.total_mass();
    assert!((1.0 - 1e-10..=1.0 + 1e-12).contains(&mass));
}

#[test]
fn normalizer_matches_empty_balance() {
    let p = reference();
    let d = normalize_one_sided(&p, 1e-10).unwrap();
    // π(0,0)·λ = outflow into the empty state.
    let inflow = d.get(&s(0, 1)) * (p.theta_s + p.mu1 * p.gamma_s() + p.mu2)
        + d.get(&s(1, 0)) * (p.mu2 + p.theta_s);
    assert!(close(d.normalizer * p.supply_rate(), inflow, 1e-12));
}

#[test]
fn identities_hold() {
    let p = reference();
    assert!(partial_balance_residual(&p, 1) < 1e-12);
    assert!(partial_balance_residual(&p, 50) < 1e-10);
    assert!(partial_balance_residual(&no_reneging(), 1) < 1e-12);
    for m in 1..=100 {
        assert!(f_summation_residual(&p, m) < 1e-10, "m = {m}");
    }
    assert!(close(g_one_from_empty_balance(&p), g_total(&p, 1), 1e-12));
    for m in 2..=100 {
        assert!(g_recursion_residual(&p, m) < 1e-10, "m = {m}");
    }
}

#[test]
fn product_form_balances() {
    let d = one_sided_on_box(&reference(), 40, 40).unwrap();
    assert!(one_sided_balance_residual(&d, Some(30)) < 1e-10);
    let d2 = two_sided_on_box(&reference(), Truncation::uniform(SystemKind::TwoSided, 25)).unwrap();
    assert!(two_sided_balance_residual(&d2, Some(20)) < 1e-10);
    let asym = NSystemParams::new(2.0, 0.5, 1.0, 3.0, 0.3, 0.5).unwrap();
    let d3 = two_sided_on_box(&asym, Truncation::uniform(SystemKind::TwoSided, 25)).unwrap();
    assert!(two_sided_balance_residual(&d3, Some(20)) < 1e-10);
}

#[test]
fn perturbation_is_detected() {
    let mut d = one_sided_on_box(&reference(), 40, 40).unwrap();
    let p = d.get(&s(2, 3));
    d.set(s(2, 3), p * 1.01);
    assert!(one_sided_balance_residual(&d, Some(30)) > 1e-3);
    let mut d2 =
        two_sided_on_box(&reference(), Truncation::uniform(SystemKind::TwoSided, 25)).unwrap();
    let b = TwoSidedState::both(1, 2).unwrap();
    let p = d2.get(&b);
    d2.set(b, p * 1.01);
    assert!(two_sided_balance_residual(&d2, Some(20)) > 1e-3);
}

#[test]
fn adaptive_two_sided_tail() {
    let d = normalize_two_sided(&reference(), 1e-10).unwrap();
    assert!(d.tail_mass_bound < 1e-10);
    assert!(d.total_mass() > 1.0 - 1e-10 && d.total_mass() < 1.0 + 1e-12);
}

fn params_strategy() -> impl Strategy<Value = NSystemParams> {
    (0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0, 0.1f64..5.0, 0.05f64..3.0, 0.05f64..3.0)
        .prop_map(|(a, b, c, d, e, f)| NSystemParams::new(a, b, c, d, e, f).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lemma_identities(p in params_strategy(), m in 1usize..60) {
        prop_assert!(f_summation_residual(&p, m) < 1e-10);
        prop_assert!(partial_balance_residual(&p, m) < 1e-10);
        prop_assert!(forms_relative_gap(&p, s(m, m / 2)) < 1e-12);
        if m >= 2 {
            prop_assert!(g_recursion_residual(&p, m) < 1e-10);
        }
        prop_assert!(close(g_one_from_empty_balance(&p), g_total(&p, 1), 1e-12));
    }

    #[test]
    fn normalized_mass_within_tolerance(p in params_strategy(), exp in 4i32..11) {
        let tol = 10f64.powi(-exp);
        let d = normalize_one_sided(&p, tol).unwrap();
        let mass = d.total_mass();
        prop_assert!(mass <= 1.0 + 1e-12 && mass >= 1.0 - tol);
        prop_assert!(d.tail_mass_bound < tol);
    }

    #[test]
    fn mirror_symmetry(p in params_strategy(), m in 0usize..10, n in 1usize..10) {
        let right = ln_weight_two_sided(&p, TwoSidedState::right(m, n).unwrap());
        let left = ln_weight_two_sided(&p.mirrored(), TwoSidedState::left(m, n).unwrap());
        prop_assert!((right - left).abs() < 1e-11);
    }

    #[test]
    fn two_sided_balance(p in params_strategy()) {
        let d = two_sided_on_box(&p, Truncation::uniform(SystemKind::TwoSided, 14)).unwrap();
        prop_assert!(two_sided_balance_residual(&d, Some(10)) < 1e-9);
    }
}
