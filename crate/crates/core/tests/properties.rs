use nmatch::model::total_variation;
use nmatch::oracle::{build_generator_one_sided, build_generator_two_sided, solve_stationary, SolveMethod};
use nmatch::product_form as pf;
use nmatch::simulator::{replicate, simulate, Horizon, SimConfig, SimMode};
use nmatch::{metrics, NSystemParams, OneSidedState, SystemKind, Truncation};
use proptest::prelude::*;

fn params() -> impl Strategy<Value = NSystemParams> {
    (0.2f64..4.0, 0.2f64..4.0, 0.2f64..4.0, 0.2f64..4.0, 0.1f64..2.0, 0.1f64..2.0)
        .prop_map(|(a, b, c, d, e, f)| NSystemParams::new(a, b, c, d, e, f).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generator_rows_are_consistent(p in params(), m in 2usize..9, n in 2usize..9) {
        let g = build_generator_one_sided(&p, m, n).unwrap();
        let g2 = build_generator_two_sided(&p, Truncation::two_sided(m, n, n, m)).unwrap();
        for i in 0..g.len() {
            let sum: f64 = g.outgoing(i).map(|(_, r)| r).sum();
            prop_assert!((sum - g.exit_rate(i)).abs() <= 1e-12 * sum);
            prop_assert!(g.outgoing(i).all(|(j, r)| j != i && r > 0.0));
        }
        for i in 0..g2.len() {
            let sum: f64 = g2.outgoing(i).map(|(_, r)| r).sum();
            prop_assert!((sum - g2.exit_rate(i)).abs() <= 1e-12 * sum);
        }
        prop_assert!(g.check_irreducible().is_ok());
        prop_assert!(g2.check_irreducible().is_ok());
    }

    /// The explicit balance equations and the generator are written
    /// independently; the oracle's solution must satisfy the former in the
    /// interior of its box.
    #[test]
    fn oracle_solution_satisfies_balance_equations(p in params()) {
        let g = build_generator_one_sided(&p, 16, 16).unwrap();
        let d = solve_stationary(&g, SolveMethod::Direct, 1e-12).unwrap();
        prop_assert!(pf::one_sided_balance_residual(&d, None) < 1e-9);
        prop_assert!(g.residual_of(&d) < 1e-11);
        let g2 = build_generator_two_sided(&p, Truncation::uniform(SystemKind::TwoSided, 10)).unwrap();
        let d2 = solve_stationary(&g2, SolveMethod::Direct, 1e-12).unwrap();
        prop_assert!(pf::two_sided_balance_residual(&d2, None) < 1e-9);
    }

    #[test]
    fn total_variation_is_a_distance(p in params(), q in params()) {
        let a = pf::one_sided_on_box(&p, 10, 10).unwrap();
        let b = pf::one_sided_on_box(&q, 10, 10).unwrap();
        let ab = total_variation(&a, &b);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab - total_variation(&b, &a)).abs() < 1e-15);
        prop_assert_eq!(total_variation(&a, &a), 0.0);
    }

    #[test]
    fn two_sided_flows_balance(p in params()) {
        let m = metrics::compute_metrics(&pf::normalize(&p, SystemKind::TwoSided, 1e-10).unwrap()).unwrap();
        prop_assert!(m.supply_balance_residual() < 1e-6);
        prop_assert!(m.demand_balance_residual() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&m.p_empty));
    }

    #[test]
    fn simulations_conserve_and_repeat(p in params(), seed in any::<u64>(), physical in any::<bool>(), two in any::<bool>()) {
        let system = if two { SystemKind::TwoSided } else { SystemKind::OneSided };
        let mode = if physical { SimMode::Physical } else { SimMode::Parsimonious };
        let cfg = SimConfig::new(system, mode, Horizon::Events(5_000), seed);
        let a = simulate(&p, &cfg).unwrap();
        prop_assert!(a.supply_flow_balanced());
        prop_assert!(a.demand_flow_balanced());
        let total: f64 = a.occupancy.count_fractions().values().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert_eq!(a, simulate(&p, &cfg).unwrap());
    }
}

#[test]
fn doubling_the_box_moves_interior_mass_less_than_the_tail() {
    for p in [
        NSystemParams::new(1.0, 1.0, 2.0, 2.0, 1.0, 0.0).unwrap(),
        NSystemParams::new(2.0, 0.5, 1.0, 3.0, 0.3, 0.0).unwrap(),
    ] {
        let small = solve_stationary(&build_generator_one_sided(&p, 12, 12).unwrap(), SolveMethod::Direct, 1e-12).unwrap();
        let large = solve_stationary(&build_generator_one_sided(&p, 24, 24).unwrap(), SolveMethod::Direct, 1e-12).unwrap();
        let tail = pf::one_sided_on_box(&p, 12, 12).unwrap().tail_mass_bound;
        for m in 0..6 {
            for n in 0..6 {
                let s = OneSidedState::new(m, n);
                assert!((small.get(&s) - large.get(&s)).abs() < tail, "{p:?} {s:?}");
            }
        }
    }
}

#[test]
fn empirical_exit_rates_match_the_generator() {
    let p = NSystemParams::new(1.0, 1.0, 2.0, 2.0, 1.0, 1.0).unwrap();
    let cfg = SimConfig::new(SystemKind::OneSided, SimMode::Parsimonious, Horizon::Events(2_000_000), 5);
    let run = simulate(&p, &cfg).unwrap();
    let g = build_generator_one_sided(&p, 60, 60).unwrap();
    for (state, _, rate) in run.empirical_exit_rates().into_iter().take(10) {
        let s = OneSidedState::new(state[0].as_u64().unwrap() as usize, state[1].as_u64().unwrap() as usize);
        let exact = g.exit_rate(g.index_of(&s).unwrap());
        assert!((rate / exact - 1.0).abs() < 0.05, "{s:?}: {rate} vs {exact}");
    }
}

#[test]
fn simulated_rates_match_metrics() {
    let p = NSystemParams::new(2.0, 0.5, 1.0, 3.0, 0.3, 0.5).unwrap();
    for system in [SystemKind::OneSided, SystemKind::TwoSided] {
        let m = metrics::compute_metrics(&pf::normalize(&p, system, 1e-10).unwrap()).unwrap();
        for mode in [SimMode::Parsimonious, SimMode::Physical] {
            let cfg = SimConfig::new(system, mode, Horizon::Events(1_000_000), 17);
            let reps = replicate(&p, &cfg, 8).unwrap();
            let checks = [
                ("throughput", m.match_throughput, reps.mean_se(|r| r.rate(|t| t.matches.total()))),
                ("supply abandonment", m.abandonment_rate_supply, reps.mean_se(|r| r.rate(|t| t.supply_abandonments))),
            ];
            for (name, exact, (mean, se)) in checks {
                assert!((mean - exact).abs() < 3.0 * se, "{system} {mode} {name}: {mean} ± {se} vs {exact}");
            }
        }
    }
}
