//! Shared fixtures for the benchmarks.

use std::collections::BTreeMap;

use abblab::pde::{Field, Grid, Scheme, SolverConfig};
use abblab::{Nonlinearity, VotingRule};

pub fn majority3() -> Nonlinearity {
    Nonlinearity::new(VotingRule::majority_fixed(3).expect("valid rule"))
}

/// Majority vote over arities 1 to `n_max` with equal weights.
pub fn wide_majority(n_max: usize) -> Nonlinearity {
    let pmf: BTreeMap<usize, f64> = (1..=n_max).map(|n| (n, 1.0 / n_max as f64)).collect();
    Nonlinearity::majority(&pmf).expect("valid rule")
}

pub fn half_line(length: f64, dx: f64) -> Field {
    Field::constant(Grid::with_spacing(length, dx).expect("valid grid"), 1.0, 0.0, 1.0)
}

pub fn solver_config(scheme: Scheme) -> SolverConfig {
    let cfg = SolverConfig::new(1.5, 1.0, 1.0).scheme(scheme);
    match scheme {
        Scheme::Imex => cfg.dt(0.02),
        Scheme::ExplicitMonotone => cfg,
    }
}
