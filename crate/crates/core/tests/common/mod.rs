#![allow(dead_code)]

use std::collections::BTreeMap;

use abblab::particle_sim::{estimate_u, run_trials, value_trial, vote_trial, Mode};
use abblab::pde::{Field, Grid, NonlocalSolver, RightBoundary, SolverConfig};
use abblab::{Nonlinearity, SimConfig, VotingRule};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn maj3() -> Nonlinearity {
    Nonlinearity::new(VotingRule::majority_fixed(3).unwrap())
}

pub fn pmf(entries: &[(usize, f64)]) -> BTreeMap<usize, f64> {
    entries.iter().copied().collect()
}

/// `2 P(vote = +1) - 1` by listing all `2^n` child configurations and thresholds.
pub fn brute_force_f(rule: &VotingRule, u: f64) -> f64 {
    let q = 0.5 * (1.0 + u);
    let mut plus = 0.0;
    for (n, p) in rule.support() {
        for mask in 0u32..(1 << n) {
            let ups = mask.count_ones() as usize;
            let prob = q.powi(ups as i32) * (1.0 - q).powi((n - ups) as i32);
            let wins: f64 = (1..=n).filter(|&k| ups >= k).map(|k| rule.eta(n, k)).sum();
            plus += p * prob * wins;
        }
    }
    2.0 * plus - 1.0
}

/// Random offspring law on `1..=n_max` with random threshold laws.
pub fn random_rule(rng: &mut StdRng, n_max: usize) -> VotingRule {
    let mut weights: Vec<f64> = (0..n_max).map(|_| rng.random::<f64>()).collect();
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let mut p = BTreeMap::new();
    let mut t = BTreeMap::new();
    let mut last = 0.0;
    for (i, w) in weights.iter().enumerate() {
        let n = i + 1;
        let w = if n == n_max { 1.0 - last } else { *w };
        last += w;
        p.insert(n, w);
        let mut eta: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let s: f64 = eta.iter().sum();
        eta.iter_mut().for_each(|e| *e /= s);
        let tail: f64 = eta[..n - 1].iter().sum();
        eta[n - 1] = 1.0 - tail;
        t.insert(n, eta);
    }
    VotingRule::new(&p, &t).unwrap()
}

/// Random majority rule on arities `1..=n_max`.
pub fn random_majority(rng: &mut StdRng, n_max: usize) -> Nonlinearity {
    let mut w: Vec<f64> = (0..n_max).map(|_| rng.random::<f64>() + 0.01).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    let tail: f64 = w[..n_max - 1].iter().sum();
    w[n_max - 1] = 1.0 - tail;
    let p: BTreeMap<usize, f64> = w.iter().enumerate().map(|(i, &x)| (i + 1, x)).collect();
    Nonlinearity::majority(&p).unwrap()
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        Self {
            name: name.into(),
            passed,
            detail,
        }
    }
}

fn random_field(rng: &mut StdRng, grid: Grid, lo: f64, hi: f64) -> Vec<f64> {
    (0..grid.n).map(|_| rng.random_range(lo..=hi)).collect()
}

/// Ordered data `u0 <= v0` with ordered boundary values, stepped side by side.
/// Returns the largest `u - v` seen over all steps and instances.
pub fn comparison_violation(instances: usize, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..instances {
        let g = random_majority(&mut rng, 5);
        let gamma = rng.random_range(1.05..3.0);
        let zeta = rng.random_range(0.2..3.0);
        let n = rng.random_range(16..120);
        let grid = Grid::new(rng.random_range(5.0..30.0), n).unwrap();
        let u0 = random_field(&mut rng, grid, -1.0, 1.0);
        let v0: Vec<f64> = u0.iter().map(|&u| rng.random_range(u..=1.0)).collect();
        let (ul, ur) = (rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0));
        let (vl, vr) = (rng.random_range(ul..=1.0), rng.random_range(ur..=1.0));
        let cfg = SolverConfig::new(gamma, zeta, 1.0);
        let mut u = Field { values: u0, ..Field::constant(grid, 0.0, ul, ur) };
        let mut v = Field { values: v0, ..Field::constant(grid, 0.0, vl, vr) };
        let mut su = NonlocalSolver::new(&g, &cfg, grid).unwrap();
        let mut sv = NonlocalSolver::new(&g, &cfg, grid).unwrap();
        for _ in 0..50 {
            su.step(&mut u);
            sv.step(&mut v);
            let d = u.values.iter().zip(&v.values).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
            worst = worst.max(d);
        }
    }
    worst
}

/// Largest increase `u(t + dt) - u(t)` when marching from `u = 1`.
pub fn time_monotonicity_violation(g: &Nonlinearity, gamma: f64, steps: usize) -> f64 {
    let grid = Grid::with_spacing(20.0, 0.1).unwrap();
    let cfg = SolverConfig::new(gamma, 1.0, 1e9);
    let mut u = Field::constant(grid, 1.0, 0.0, 1.0);
    let mut solver = NonlocalSolver::new(g, &cfg, grid).unwrap();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..steps {
        let prev = u.values.clone();
        solver.step(&mut u);
        let d = u.values.iter().zip(&prev).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(d);
    }
    worst
}

/// Largest excursion outside `[-1, 1]` from random data in `[-1, 1]`.
pub fn range_violation(instances: usize, seed: u64) -> f64 {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let g = random_majority(&mut rng, 6);
        let grid = Grid::new(15.0, rng.random_range(16..100)).unwrap();
        let cfg = SolverConfig::new(rng.random_range(1.05..3.0), rng.random_range(0.2..3.0), 1.0)
            .bc_right(if rng.random_bool(0.5) { RightBoundary::One } else { RightBoundary::Zero });
        let values = random_field(&mut rng, grid, -1.0, 1.0);
        let mut u = Field { values, ..Field::constant(grid, 0.0, rng.random_range(-1.0..=1.0), cfg.bc_right.value()) };
        let mut solver = NonlocalSolver::new(&g, &cfg, grid).unwrap();
        for _ in 0..100 {
            solver.step(&mut u);
            let ex = u.values.iter().map(|v| v.abs() - 1.0).fold(0.0, f64::max);
            worst = worst.max(ex);
        }
    }
    worst
}

/// Generation `l` started at `gamma^l x` against generation 0 at `x`:
/// `(l, diff, combined SE)` for each `l`.
pub fn rescaling_rows(g: &Nonlinearity, gamma: f64, x: f64, t: f64, trials: u64) -> Vec<(i32, f64, f64)> {
    let base = estimate_u(&g.rule, &SimConfig::new(x, gamma, 1.0, t).seed(11), trials).unwrap();
    (-2..=2)
        .map(|l| {
            let cfg = SimConfig::new(gamma.powi(l) * x, gamma, 1.0, t)
                .generation(l)
                .seed((1000 + l) as u64);
            let e = estimate_u(&g.rule, &cfg, trials).unwrap();
            let se = (e.std_error.powi(2) + base.std_error.powi(2)).sqrt();
            (l, e.mean - base.mean, se)
        })
        .collect()
}

/// Trials among `trials` where `sgn(value) != vote` under the same trial keys.
pub fn equivariance_mismatches(g: &Nonlinearity, cfg: &SimConfig, trials: u64) -> u64 {
    (0..trials)
        .filter(|&i| {
            let v = vote_trial(&g.rule, cfg, i);
            let x = value_trial(&g.rule, cfg, i);
            !v.truncated && !x.truncated && (x.value > 0.0) != (v.value > 0.0)
        })
        .count() as u64
}

/// Two runs of the same seed agree bit for bit, and a different seed differs.
pub fn deterministic(g: &Nonlinearity, cfg: &SimConfig, trials: u64) -> bool {
    let a = run_trials(&g.rule, cfg, Mode::Value, trials).unwrap();
    let b = run_trials(&g.rule, cfg, Mode::Value, trials).unwrap();
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_trials(&g.rule, cfg, Mode::Value, trials).unwrap());
    let c = run_trials(&g.rule, &cfg.clone().seed(cfg.seed + 1), Mode::Value, trials).unwrap();
    let bits = |v: &[abblab::TrialOutcome]| v.iter().map(|o| o.value.to_bits()).collect::<Vec<_>>();
    bits(&a) == bits(&b) && bits(&a) == bits(&single) && bits(&a) != bits(&c)
}
