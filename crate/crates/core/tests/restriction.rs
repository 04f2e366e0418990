mod common;

use common::*;
use fsicloud::field_grid::{ball_average, divergence, SolenoidalSampler, VecField};
use fsicloud::geometry::Vec2;
use fsicloud::restriction::{
    apply_r, apply_rn, ball_spread, h_derivative, measure_operator_norms, measure_ratios, RestrictionConfig,
};
use proptest::prelude::*;

fn sampler(center: Vec2, support: f64) -> SolenoidalSampler {
    SolenoidalSampler { center, support, wavelength: 0.08, modes: 8 }
}

fn max_diff(a: &VecField, b: &VecField) -> f64 {
    (a - b).max_abs()
}

#[test]
fn constants_are_fixed() {
    let g = unit_grid(128);
    let c = Vec2::new(0.3, -1.2);
    let u = VecField::constant(g, c);
    let out = apply_r(&u, Vec2::new(0.5, 0.5), 0.1).unwrap();
    assert!(max_diff(&out, &u) < 1e-12);
    let cfg = RestrictionConfig::new(vec![Vec2::new(0.4, 0.5), Vec2::new(0.6, 0.5)], vec![0.02, 0.025]).unwrap();
    let out = apply_rn(&u, &cfg).unwrap();
    assert!(max_diff(&out, &u) < 1e-12);
}

#[test]
fn spread_of_a_large_constant_is_rounding_small() {
    let g = unit_grid(128);
    let u = VecField::constant(g, Vec2::new(7.0 + 1.0 / 3.0, -3.1));
    // A one-pass variance gives ~1e-7 here.
    let s = ball_spread(&u, Vec2::new(0.5, 0.5), 0.1);
    assert!(s < 1e-12, "{s}");
}

#[test]
fn rotation_has_zero_ball_average() {
    let g = unit_grid(128);
    let h = Vec2::new(0.5, 0.5);
    let r = 0.08;
    let u = VecField::from_stream(g, |x| 0.5 * (x - h).dot(x - h));
    assert!(ball_average(&u, h, r).unwrap().norm() < 1e-12);
    let out = apply_r(&u, h, r).unwrap();
    for comp in 0..2 {
        let (cols, rows) = g.face_dims(comp);
        for j in 0..rows {
            for i in 0..cols {
                let k = j * cols + i;
                let d = (g.face_pos(comp, i, j) - h).norm();
                if d < r {
                    assert!(out.component(comp)[k].abs() < 1e-9, "inside {d}");
                } else if d >= 2.0 * r {
                    assert_eq!(out.component(comp)[k].to_bits(), u.component(comp)[k].to_bits());
                }
            }
        }
    }
    assert!(divergence(&out).max_abs() < 1e-8);
}

#[test]
fn single_stage_cascade_is_apply_r() {
    let g = unit_grid(96);
    let h = Vec2::new(0.45, 0.55);
    let u = sampler(h, 0.3).sample(&g, &mut rng(3));
    let a = apply_rn(&u, &RestrictionConfig::single(h, 0.05).unwrap()).unwrap();
    let b = apply_r(&u, h, 0.05).unwrap();
    assert_eq!(max_diff(&a, &b), 0.0);
}

#[test]
fn nested_pair_shares_one_constant() {
    let g = unit_grid(128);
    let h2 = Vec2::new(0.5, 0.5);
    let (r1, r2) = (0.025, 0.03);
    let h1 = h2 + Vec2::new(0.06, 0.04);
    assert!((h1 - h2).norm() + 2.0 * r1 <= 5.0 * r2);
    let cfg = RestrictionConfig::new(vec![h1, h2], vec![r1, r2]).unwrap();
    for seed in 0..4 {
        let u = sampler(h2, 0.45).sample(&g, &mut rng(seed));
        let out = apply_rn(&u, &cfg).unwrap();
        let scale = 1.0 + u.max_abs();
        assert!(ball_spread(&out, h1, r1) / scale < 1e-8);
        assert!(ball_spread(&out, h2, r2) / scale < 1e-8);
        // Λ₂ is the constant the second stage writes on its own (enlarged) ball.
        let lam2 = ball_average(&out, h2, r2).unwrap();
        let lam1 = ball_average(&out, h1, r1).unwrap();
        assert!((lam1 - lam2).norm() / scale < 1e-8, "{lam1:?} vs {lam2:?}");
    }
}

#[test]
fn far_apart_bodies_act_independently() {
    let g = unit_grid(128);
    let (h1, h2) = (Vec2::new(0.2, 0.5), Vec2::new(0.8, 0.5));
    let (r1, r2) = (0.02, 0.024);
    assert!((h1 - h2).norm() > 2.0 * 5.0 * r2 + 2.0 * r1);
    let cfg = RestrictionConfig::new(vec![h1, h2], vec![r1, r2]).unwrap();
    let u = sampler(Vec2::new(0.5, 0.5), 0.5).sample(&g, &mut rng(11));
    let both = apply_rn(&u, &cfg).unwrap();
    let separate = apply_r(&apply_r(&u, h2, 5.0 * r2).unwrap(), h1, r1).unwrap();
    let other_order = apply_r(&apply_r(&u, h1, r1).unwrap(), h2, 5.0 * r2).unwrap();
    assert!(max_diff(&both, &separate) < 1e-10);
    assert!(max_diff(&both, &other_order) < 1e-10);
}

#[test]
fn random_suite_on_small_sample() {
    let configs = suite_configs(7, 6, 2);
    let rep = restriction_suite(128, &configs, 3, 1);
    assert_eq!(rep.applications, 18);
    assert!(rep.nested_configs >= 2);
    assert!(rep.max_divergence <= 1e-7, "{rep:?}");
    assert!(rep.locality_exact);
    assert!(rep.constancy <= 1e-8, "{rep:?}");
}

#[test]
fn h_derivative_of_constant_is_zero() {
    let g = unit_grid(64);
    let u = VecField::constant(g, Vec2::new(1.0, 2.0));
    for d in h_derivative(&u, Vec2::new(0.5, 0.5), 0.1).unwrap() {
        assert!(d.max_abs() < 1e-9);
    }
}

#[test]
fn h_derivative_matches_central_difference() {
    let rep = h_derivative_check(256, 0.1, 4, 100);
    assert!(rep.rel_error <= 0.05, "{rep:?}");
    assert!(rep.outside <= 1e-10, "{rep:?}");
}

#[test]
fn constant_fields_give_unit_ratios() {
    let g = unit_grid(64);
    let cfg = RestrictionConfig::single(Vec2::new(0.5, 0.5), 0.05).unwrap();
    let rep = measure_ratios(&cfg, &[VecField::constant(g, Vec2::new(0.7, 0.1))], 2.0).unwrap();
    assert!((rep.ratio_l - 1.0).abs() < 1e-12);
    assert_eq!(rep.ratio_w, 1.0);
    // ‖∇(Rφ − φ)‖ and ‖∇φ‖ both vanish; the value error is an honest 0.
    assert!(rep.err_ratio_l < 1e-12);
    assert_eq!(rep.skipped, 1);
}

#[test]
fn gradient_ratio_is_uniform_in_r() {
    let g = unit_grid(128);
    let ratios: Vec<f64> = [0.02, 0.04, 0.08]
        .iter()
        .map(|&r| {
            let cfg = RestrictionConfig::single(Vec2::new(0.5, 0.5), r).unwrap();
            measure_operator_norms(&cfg, &g, 2.0, 20, 0).unwrap().ratio_w
        })
        .collect();
    let (lo, hi) = ratios.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &x| (l.min(x), h.max(x)));
    assert!(hi / lo <= 1.2, "{ratios:?}");
}

#[test]
fn three_stage_growth_is_bounded_by_single_stage_cube() {
    let g = unit_grid(128);
    let single = RestrictionConfig::single(Vec2::new(0.5, 0.5), 0.02).unwrap();
    let c = measure_operator_norms(&single, &g, 2.0, 20, 5).unwrap().c_estimate;
    let cfg = RestrictionConfig::new(
        vec![Vec2::new(0.35, 0.4), Vec2::new(0.6, 0.6), Vec2::new(0.5, 0.45)],
        vec![0.02, 0.02, 0.02],
    )
    .unwrap();
    let rep = measure_operator_norms(&cfg, &g, 2.0, 20, 5).unwrap();
    let growth = rep.c_estimate.powi(3);
    assert!(growth <= 1.5 * c.powi(3), "growth {growth} vs c³ {}", c.powi(3));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn cascade_is_linear(seed in 0u64..1_000_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let g = unit_grid(96);
        let cfg = scattered(&mut rng(seed));
        let s = sampler(Vec2::new(0.5, 0.5), 0.5);
        let (u, v) = (s.sample(&g, &mut rng(seed + 1)), s.sample(&g, &mut rng(seed + 2)));
        let mut mix = u.clone();
        mix.scale(alpha);
        mix.axpy(beta, &v);
        let lhs = apply_rn(&mix, &cfg).unwrap();
        let mut rhs = apply_rn(&u, &cfg).unwrap();
        rhs.scale(alpha);
        rhs.axpy(beta, &apply_rn(&v, &cfg).unwrap());
        prop_assert!(max_diff(&lhs, &rhs) <= 1e-10 * (1.0 + mix.max_abs()));
    }

    #[test]
    fn support_grows_by_at_most_the_cascade_reach(seed in 0u64..1_000_000) {
        let g = unit_grid(96);
        let mut r = rng(seed);
        let cfg = scattered(&mut r);
        let c = Vec2::new(0.5, 0.5);
        let support = 0.2;
        let u = sampler(c, support).sample(&g, &mut r);
        let out = apply_rn(&u, &cfg).unwrap();
        // Each stage spreads support by at most the diameter of its outer ball; the sum is
        // below the bound 2·5^N r_N.
        let reach: f64 = (0..cfg.len()).map(|n| 4.0 * cfg.cascade_radius(n)).sum();
        prop_assert!(reach <= 10.0 * cfg.cascade_radius(cfg.len() - 1));
        for comp in 0..2 {
            let (cols, rows) = g.face_dims(comp);
            for j in 0..rows {
                for i in 0..cols {
                    let d = (g.face_pos(comp, i, j) - c).norm();
                    if d > support + reach + 2.0 * g.h() {
                        prop_assert_eq!(out.component(comp)[j * cols + i], 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn random_configurations_keep_the_properties(seed in 0u64..1_000_000) {
        let cfg = if seed % 2 == 0 { nested_pair(&mut rng(seed)) } else { scattered(&mut rng(seed)) };
        let rep = restriction_suite(128, &[cfg], 1, seed);
        prop_assert!(rep.max_divergence <= 1e-7);
        prop_assert!(rep.locality_exact);
        prop_assert!(rep.constancy <= 1e-8);
    }
}
