mod common;

use abblab::certificates::{
    build_h, build_v_omega, build_w, check_supersolution, kappa, log_offset_grid, offset_grid,
};
use abblab::nonlinearity::sigma;
use common::{maj3, random_majority};
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

#[test]
fn supersolution_holds_below_the_critical_rate() {
    let mut rng = StdRng::seed_from_u64(3);
    for _ in 0..200 {
        let g = random_majority(&mut rng, 6);
        let ups = g.upsilon.value;
        let gamma = rng.random_range(ups + 0.05..ups + 5.0);
        let zeta = rng.random_range(0.2..4.0);
        let omega = rng.random_range(0.05..=1.0);
        let xi = rng.random_range(0.05..=1.5);
        let hi = rng.random_range(1.0..200.0);
        let xs = offset_grid(0.0, hi, rng.random_range(100..3000));
        let star = zeta * (1.0 - ups * gamma.powf(-omega));
        let delta = star - star.abs() * rng.random_range(0.0..=1.0);
        let r = check_supersolution(delta, xi, omega, &g, zeta, gamma, &xs).unwrap();
        assert!(
            r.passed,
            "gamma {gamma} zeta {zeta} omega {omega} xi {xi} delta {delta}: {:?}",
            r.linear_bound
        );
    }
}

#[test]
fn linear_supersolution_fails_above_the_critical_rate() {
    let g = maj3();
    let xs = log_offset_grid(1e-3, 1e3, 500);
    for gamma in [1.6, 2.0, 4.0] {
        let star = 1.0 - g.upsilon.value / gamma;
        let r = check_supersolution(star * 1.01, 1.0, 1.0, &g, 1.0, gamma, &xs).unwrap();
        assert!(!r.linear_bound.passed);
        assert!(r.linear_bound.min_residual < 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn h_sits_between_identity_and_f(seed in any::<u64>(), t in 0.1f64..0.9) {
        let g = random_majority(&mut StdRng::seed_from_u64(seed), 7);
        prop_assume!(g.fprime0 > 1.05);
        let f = 1.0 + t * (g.fprime0 - 1.0);
        let xi = g.xi().unwrap();
        let h = build_h(&g, xi, f).unwrap();
        let r = h.validate(&g);
        prop_assert!(r.passed, "{r:?}");
        prop_assert!(r.lower_margin >= -1e-12 && r.upper_margin >= -1e-12);
        let [v, d, _] = h.jet(0.5 * h.linear_end);
        prop_assert!((v - 0.5 * f * h.linear_end).abs() < 1e-12 && (d - f).abs() < 1e-12);
        prop_assert!((h.value(xi) - xi).abs() < 1e-9);
    }

    #[test]
    fn v_omega_descent_keeps_its_inequality(b in 0.4f64..0.85, f in 1.2f64..1.8, target in 0.25f64..0.6) {
        let s = sigma(f, 1.0 / b).unwrap().value;
        let nu = (s + 0.2 * s.abs() + 0.01).max(0.0);
        let (k, _) = kappa(b, f, nu);
        prop_assert!(k > 0.0);
        let alpha_min = (1.0 - k / (f - 1.0)).max(0.0).cbrt();
        let alpha = if alpha_min < 0.85 { 0.9 } else { 0.5 * (alpha_min + 1.0) };
        let v = build_v_omega(b, f, nu, alpha, target).unwrap();
        prop_assert!(v.report.passed);
        prop_assert!((v.omega - target).abs() < 1e-12);
        prop_assert!(v.m_omega < target / alpha);
        let s = v.func.check_structure();
        prop_assert!(s.passed, "{s:?}");
        // Monotone, with v(1) = 1.
        prop_assert!((v.func.value(1.0) - 1.0).abs() < 1e-12);
        let xs = offset_grid(0.0, 1.0, 2000);
        prop_assert!(xs.windows(2).all(|w| v.func.value(w[0]) <= v.func.value(w[1]) + 1e-15));
    }
}

#[test]
fn scaffold_kinks_point_upward() {
    let g = maj3();
    let (b, f) = (0.82, 1.4);
    let nu = sigma(f, 1.0 / b).unwrap().value.max(0.0);
    let h = build_h(&g, 1.0, f).unwrap();
    let v = build_v_omega(b, f, nu, 0.9, 1.0).unwrap();
    let w = build_w(&h, b, &v, h.delta, b.powi(-40)).unwrap();
    assert!(w.structure.passed, "{:?}", w.structure);
    assert!(w.structure.max_gap < 1e-9);
    // Convex kinks only: w'(x+) - w'(x-) >= 0, the orientation a subsolution may carry.
    assert!(w.structure.min_jump >= -1e-9, "{:?}", w.structure);
    assert!((w.far_value - 1.0).abs() < 0.01);
    assert!(w.far_sequence.windows(2).all(|p| p[0] <= p[1] + 1e-12));
}

#[test]
fn kappa_oracle_from_the_critical_point() {
    for (b, f, nu) in [(0.5f64, 2.0, 0.5), (0.82, 1.4, 0.3), (0.45, 1.4, 1.0), (0.6, 1.5, 0.6)] {
        // f B^w - 1 + nu w is convex in w; its minimizer solves f ln(B) B^w + nu = 0.
        let star = ((nu / (-f * b.ln())).ln() / b.ln()).clamp(0.0, 1.0);
        let exact = f * b.powf(star) - 1.0 + nu * star;
        let (k, at) = kappa(b, f, nu);
        assert!((k - exact).abs() < 1e-5, "{k} vs {exact}");
        assert!((at - star).abs() < 1e-3, "{at} vs {star}");
    }
}
