mod common;

use abblab::pde::{
    march_to_steady, residual_nonlocal, solve_cauchy, steady_state, Field, Grid, NonlocalSolver, ResidualReport,
    Scheme, SolverConfig,
};
use abblab::{Nonlinearity, VotingRule};
use common::maj3;
use proptest::prelude::*;
use statrs::function::erf::erf;

#[test]
fn comparison_principle_on_random_ordered_data() {
    let worst = common::comparison_violation(100, 2024);
    assert!(worst <= 1e-12, "max (u - v) = {worst}");
}

#[test]
fn solution_from_one_decreases_in_time() {
    let g = maj3();
    for gamma in [1.1, 1.5, 3.0] {
        let worst = common::time_monotonicity_violation(&g, gamma, 3000);
        assert!(worst <= 1e-12, "gamma {gamma}: increase {worst}");
    }
}

#[test]
fn range_is_preserved() {
    let worst = common::range_violation(60, 7);
    assert!(worst <= 1e-12, "excursion {worst}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ordered_constants_stay_ordered(a in -1.0f64..1.0, gap in 0.0f64..1.0, gamma in 1.01f64..4.0, zeta in 0.1f64..4.0) {
        let b = (a + gap).min(1.0);
        let g = maj3();
        let grid = Grid::new(10.0, 40).unwrap();
        let cfg = SolverConfig::new(gamma, zeta, 1.0);
        let mut u = Field::constant(grid, a, a, a);
        let mut v = Field::constant(grid, b, b, b);
        let mut s = NonlocalSolver::new(&g, &cfg, grid).unwrap();
        s.advance_to(&mut u, 1.0);
        s.advance_to(&mut v, 1.0);
        for (x, y) in u.values.iter().zip(&v.values) {
            prop_assert!(x <= &(y + 1e-12));
        }
    }
}

#[test]
fn heat_error_shrinks_with_the_grid() {
    let id = Nonlinearity::new(VotingRule::majority_fixed(1).unwrap());
    let errors: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|&dx| {
            let grid = Grid::with_spacing(10.0, dx).unwrap();
            let f = &solve_cauchy(&id, &SolverConfig::new(1.0, 1.0, 0.5), grid, &[0.5]).unwrap()[0];
            (0..grid.n)
                .map(|i| (f.values[i] - erf(grid.x(i) / 1.0)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    assert!(errors[0] > errors[1] && errors[1] > errors[2], "{errors:?}");
    assert!(errors[2] < 2e-3);
}

#[test]
fn doubling_the_domain_leaves_the_left_half_alone() {
    let g = maj3();
    for gamma in [1.2, 2.0] {
        let cfg = SolverConfig::new(gamma, 1.0, 5.0);
        let short = &solve_cauchy(&g, &cfg, Grid::with_spacing(20.0, 0.05).unwrap(), &[5.0]).unwrap()[0];
        let long = &solve_cauchy(&g, &cfg, Grid::with_spacing(40.0, 0.05).unwrap(), &[5.0]).unwrap()[0];
        let diff = (1..200).map(|i| (short.at(0.05 * i as f64) - long.at(0.05 * i as f64)).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-3, "gamma {gamma}: {diff}");
    }
}

#[test]
fn imex_and_explicit_agree() {
    let g = maj3();
    let grid = Grid::with_spacing(20.0, 0.05).unwrap();
    let ex = &solve_cauchy(&g, &SolverConfig::new(1.5, 1.0, 3.0), grid, &[3.0]).unwrap()[0];
    let im = &solve_cauchy(&g, &SolverConfig::new(1.5, 1.0, 3.0).scheme(Scheme::Imex).dt(0.005), grid, &[3.0])
        .unwrap()[0];
    assert!(ex.max_abs_diff(im) < 5e-3, "{}", ex.max_abs_diff(im));
}

#[test]
fn steady_states_have_small_residual() {
    let g = maj3();
    let grid = Grid::with_spacing(20.0, 0.05).unwrap();
    for gamma in [1.2, 2.0] {
        let cfg = SolverConfig::new(gamma, 1.0, 2000.0).scheme(Scheme::Imex).dt(0.02);
        let s = steady_state(&g, &cfg, grid).unwrap();
        assert!(s.converged);
        let r = ResidualReport::new(&s.field, &residual_nonlocal(&s.field, &g, &cfg));
        assert!(r.max_residual < 1e-5, "gamma {gamma}: {r:?}");
        // Restarting from the answer stops at once.
        let again = march_to_steady(&g, &cfg, s.field.clone()).unwrap();
        assert!(again.converged && again.field.max_abs_diff(&s.field) < 1e-6);
    }
}
