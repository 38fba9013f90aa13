use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nbafl_core::bounds::{
    bound_table, corrected_bound, original_series, paper_noise_moments, unroll, BoundVariant, UnrollRoute,
};
use nbafl_core::constants::{derive_constants, AssumptionParams, DerivedConstants, Lambda1Variant, PrivacyConfig};
use nbafl_core::noise::{make_noise_model, mc_moments, NoiseKind, NoiseModel};

prop_compose! {
    fn assumptions()(
        rho in 0.1f64..5.0,
        b in 0.0f64..2.0,
        mu in 0.2f64..5.0,
        l in 0.05f64..3.0,
        beta in 0.0f64..10.0,
    ) -> AssumptionParams {
        AssumptionParams::new(rho, b, mu, l, beta).unwrap()
    }
}

prop_compose! {
    fn privacy(rounds: u64)(
        epsilon in 0.1f64..50.0,
        c in 0.0f64..5.0,
        clip in 0.1f64..10.0,
        m in 1u64..1000,
        n_clients in 1u64..50,
    ) -> PrivacyConfig {
        PrivacyConfig { epsilon, delta: None, c, clip, m, n_clients, rounds }
    }
}

fn constants(a: &AssumptionParams, p: &PrivacyConfig, theta: f64) -> DerivedConstants {
    derive_constants(a, p, theta, Lambda1Variant::Corrected).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #[test]
    fn unroll_routes_match_closed_form(
        a in assumptions(),
        rounds in 1u64..60,
        p_seed in privacy(1),
        theta in 0.0f64..10.0,
    ) {
        let p = PrivacyConfig { rounds, ..p_seed };
        let d = constants(&a, &p, theta);
        let closed = corrected_bound(rounds, &d, &p).unwrap();
        for route in [UnrollRoute::GapRecursion, UnrollRoute::IncrementSum] {
            let series = unroll(route, rounds, &d, &p).unwrap();
            prop_assert_eq!(series.values.len() as u64, rounds + 1);
            prop_assert_eq!(series.values[0], (0, theta));
            prop_assert!(close(series.final_value(), closed, 1e-10), "{:?}: {} vs {}", route, series.final_value(), closed);
        }
    }

    #[test]
    fn corrected_bound_nondecreasing_when_k2_nonnegative(
        a in assumptions(),
        p in privacy(40),
        theta in 0.0f64..10.0,
    ) {
        let d = constants(&a, &p, theta);
        prop_assume!(d.k2_corr >= 0.0);
        let mut prev = corrected_bound(0, &d, &p).unwrap();
        for t in 1..=40 {
            let next = corrected_bound(t, &d, &p).unwrap();
            prop_assert!(next >= prev, "t={}: {} < {}", t, next, prev);
            prev = next;
        }
    }

    #[test]
    fn corrected_bound_decreasing_in_epsilon(
        a in assumptions(),
        p in privacy(10),
        t in 1u64..=10,
        factor in 1.01f64..4.0,
    ) {
        let d = constants(&a, &p, 1.0);
        prop_assume!(d.k1_corr > 0.0 && d.k0_corr > 0.0);
        let looser = PrivacyConfig { epsilon: p.epsilon * factor, ..p };
        let d_looser = constants(&a, &looser, 1.0);
        prop_assert!(corrected_bound(t, &d_looser, &looser).unwrap() < corrected_bound(t, &d, &p).unwrap());
    }

    #[test]
    fn moments_scale_with_rounds_over_epsilon(
        a in assumptions(),
        p in privacy(5),
    ) {
        let base = paper_noise_moments(&constants(&a, &p, 1.0), &p);
        let doubled_t = PrivacyConfig { rounds: 10, ..p };
        let doubled_eps = PrivacyConfig { epsilon: 2.0 * p.epsilon, ..p };
        let mt = paper_noise_moments(&constants(&a, &doubled_t, 1.0), &doubled_t);
        let me = paper_noise_moments(&constants(&a, &doubled_eps, 1.0), &doubled_eps);
        prop_assert!(close(mt.mean_norm, 2.0 * base.mean_norm, 1e-14));
        prop_assert!(close(mt.mean_sq_norm, 4.0 * base.mean_sq_norm, 1e-14));
        prop_assert!(close(me.mean_norm, 0.5 * base.mean_norm, 1e-14));
        prop_assert!(close(me.mean_sq_norm, 0.25 * base.mean_sq_norm, 1e-14));
    }

    #[test]
    fn aggregate_matched_variance_matches_model(
        a in assumptions(),
        p in privacy(8),
        dim in 1usize..64,
    ) {
        let d = constants(&a, &p, 1.0);
        let model = make_noise_model(NoiseKind::AggregateMatched, &d, &p, dim).unwrap();
        let total = dim as f64 * model.per_coord_std * model.per_coord_std;
        let expected = paper_noise_moments(&d, &p).mean_sq_norm;
        prop_assert!((total - expected).abs() <= 1e-12 * expected.max(f64::MIN_POSITIVE), "{} vs {}", total, expected);
    }

    #[test]
    fn monte_carlo_respects_jensen(
        sigma in 0.0f64..5.0,
        dim in 1usize..20,
        samples in 1u64..200,
        seed in any::<u64>(),
    ) {
        let model = NoiseModel::new(NoiseKind::PerClient, sigma, dim).unwrap();
        let m = mc_moments(&model, samples, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(m.mean_norm * m.mean_norm <= m.mean_sq_norm);
        prop_assert_eq!(m.sample_count, samples);
    }

    #[test]
    fn evaluators_are_pure(
        a in assumptions(),
        p in privacy(12),
        theta in 0.0f64..10.0,
    ) {
        let d1 = constants(&a, &p, theta);
        let d2 = constants(&a, &p, theta);
        prop_assert_eq!(d1, d2);
        let t1 = bound_table(12, &d1, &p);
        let t2 = bound_table(12, &d2, &p);
        match (t1, t2) {
            (Ok(t1), Ok(t2)) => prop_assert_eq!(t1, t2),
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "bound_table differs between identical calls"),
        }
    }

    #[test]
    fn table_rows_agree_with_horizon_bounds(
        a in assumptions(),
        p in privacy(9),
        theta in 0.0f64..10.0,
    ) {
        let d = constants(&a, &p, theta);
        prop_assume!(d.k0_orig.is_some());
        let table = bound_table(9, &d, &p).unwrap();
        prop_assert_eq!(table[0].get(BoundVariant::OriginalThm2), theta);
        for row in &table {
            let closed = row.get(BoundVariant::CorrectedClosed);
            for v in [BoundVariant::CorrectedUnrolledEq6, BoundVariant::CorrectedUnrolledEq3] {
                prop_assert!(close(row.get(v), closed, 1e-10));
            }
        }
        let series = original_series(&d, &p).unwrap();
        prop_assert_eq!(series.final_value(), table[9].get(BoundVariant::OriginalThm2));
    }
}
