use mprsens::oracle::{brute_solve, fit_order};
use mprsens::sensitivity::analyze;
use mprsens::strategies::{deficit, derive_gammas, select_epsilon};
use mprsens::{solve_unperturbed, NodeFunction, TreeMarket, UtilitySpec};
use proptest::prelude::*;

fn utility() -> impl Strategy<Value = UtilitySpec> {
    prop_oneof![
        (-2.0f64..0.8)
            .prop_filter("p != 0", |p| p.abs() > 0.05)
            .prop_map(|p| UtilitySpec::power(p).unwrap()),
        Just(UtilitySpec::log()),
        (-1.5f64..-0.05, 0.05f64..0.8).prop_map(|(a, b)| UtilitySpec::mixed_power(&[a, b]).unwrap()),
    ]
}

fn market() -> impl Strategy<Value = TreeMarket> {
    (1usize..=3, 0.1f64..0.4, 0.3f64..2.0, -1.0f64..1.0, -2.0f64..2.0, any::<bool>()).prop_map(
        |(steps, sigma, lambda, nu0, slope, tri)| {
            let nu = NodeFunction::Affine {
                intercept: nu0,
                state_slope: slope,
                time_slope: 0.0,
            };
            if tri {
                TreeMarket::trinomial(steps, 0.25, sigma, lambda, nu).unwrap()
            } else {
                TreeMarket::binomial(steps, 0.25, sigma, lambda, nu).unwrap()
            }
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn identities_hold_on_random_trees(m in market(), u in utility(), x in 0.5f64..2.0) {
        let pair = solve_unperturbed(&m, &u, x).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        let scale = 1.0 + rep.u0.abs();
        prop_assert!((rep.u0 - rep.v0 - pair.x * pair.y).abs() <= 1e-9 * scale);
        let r = rep.residuals;
        prop_assert!(r.axx_byy <= 1e-9, "{r:?}");
        prop_assert!(r.matrix_product <= 1e-8, "{r:?}");
        prop_assert!(r.gap <= 1e-8 * (1.0 + rep.coefficients.add.abs()), "{r:?}");
        prop_assert!(r.product_martingales <= 1e-9 * scale, "{r:?}");
    }

    #[test]
    fn value_curvature_in_wealth(m in market(), u in utility()) {
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        prop_assert!(rep.hessian_u[0][0] < 0.0);
        prop_assert!(rep.hessian_v[0][0] > 0.0);
        let c = rep.coefficients;
        prop_assert!(c.axx >= u.c1 - 1e-9 && c.axx <= u.c2 + 1e-9);
    }

    #[test]
    fn corrected_strategies_are_suboptimal(m in market(), u in utility(), t in 0.05f64..1.0) {
        let pair = solve_unperturbed(&m, &u, 1.0).unwrap();
        let rep = analyze(&m, &u, &pair).unwrap();
        let gammas = derive_gammas(&pair, &rep, &m).unwrap();
        prop_assert!(gammas.0.replay_residual <= 1e-9 && gammas.1.replay_residual <= 1e-9);
        let h = 0.01 * t;
        let oracle = brute_solve(&m, &u, 1.0 + h, h).unwrap();
        let row = deficit(&m, &u, &pair, &gammas, h, h, oracle.u0).unwrap();
        prop_assert!(row.deficit >= -1e-12, "{row:?}");
    }

    #[test]
    fn power_value_is_homogeneous(m in market(), p in 0.1f64..0.9, c in 0.5f64..3.0) {
        let u = UtilitySpec::power(p).unwrap();
        let a = solve_unperturbed(&m, &u, 1.0).unwrap();
        let b = solve_unperturbed(&m, &u, c).unwrap();
        prop_assert!((b.u0 - c.powf(p) * a.u0).abs() <= 1e-10 * b.u0.abs());
    }

    #[test]
    fn zero_direction_leaves_value_unchanged(m in market(), u in utility(), delta in -0.2f64..0.2) {
        let m = m.with_nu(&NodeFunction::Constant(0.0));
        let a = solve_unperturbed(&m, &u, 1.0).unwrap();
        let b = brute_solve(&m, &u, 1.0, delta).unwrap();
        prop_assert_eq!(a.u0, b.u0);
    }

    #[test]
    fn fit_recovers_power_laws(k in 1.0f64..5.0, c in 1e-3f64..1e3) {
        let pts: Vec<(f64, f64)> = (2..=6).map(|j| {
            let t = 0.5f64.powi(j);
            (t, c * t.powf(k))
        }).collect();
        prop_assert!((fit_order(&pts).unwrap() - k).abs() < 1e-9);
    }

    #[test]
    fn epsilon_is_monotone(a in 0.0f64..2.0, b in 0.0f64..2.0, s in 1.0f64..4.0) {
        let e = select_epsilon(a, b);
        prop_assert!((1e-3..=1.0).contains(&e));
        prop_assert!(select_epsilon(s * a, s * b) >= e);
    }
}
