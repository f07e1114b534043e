//! Experiment drivers: phase scans, spreading-rate fits, Monte Carlo against PDE
//! comparisons, value-distribution checks and certificate bundles, plus the
//! TOML configuration and the CSV/JSON outputs of a run.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::certificates::{
    build_h, build_v_omega, build_w, check_subsolution_inequality, check_supersolution, log_offset_grid,
    offset_grid, second_order_onset, write_piecewise_csv, HReport, Scaffold, SubsolutionReport,
    SupersolutionReport, VOmega,
};
use crate::error::{Error, Result};
use crate::nonlinearity::{sigma, Nonlinearity, SpeedPair, VotingRule};
use crate::numeric::linear_fit;
use crate::particle_sim::{estimate_u, estimate_value_cdf, SimConfig, DEFAULT_PARTICLE_CAP};
use crate::pde::{
    steady_state, write_profile_csv, Field, Grid, NonlocalSolver, RightBoundary, Scheme, SolverConfig,
};

/// `max_{x <= L/2} U` at or below this is classified trivial.
pub const TRIVIAL_THRESHOLD: f64 = 0.05;
/// `max_{x <= L/2} U` at or above this multiple of `Xi` is classified nontrivial.
pub const NONTRIVIAL_FRACTION: f64 = 0.5;
/// The domain doubles once the tracked level passes this fraction of `L`.
pub const GROW_FRACTION: f64 = 0.4;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    #[default]
    Majority,
    Custom,
}

/// `[rule]`: offspring law keyed by arity, and for custom rules the threshold vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSpec {
    #[serde(default)]
    pub kind: RuleKind,
    pub pmf: BTreeMap<String, f64>,
    #[serde(default)]
    pub thresholds: BTreeMap<String, Vec<f64>>,
}

fn arity_keyed<T: Clone>(m: &BTreeMap<String, T>) -> Result<BTreeMap<usize, T>> {
    m.iter()
        .map(|(k, v)| {
            k.trim()
                .parse::<usize>()
                .map(|n| (n, v.clone()))
                .map_err(|_| Error::Config(format!("arity key {k:?} is not a positive integer")))
        })
        .collect()
}

impl RuleSpec {
    pub fn majority(pmf: &[(usize, f64)]) -> Self {
        Self {
            kind: RuleKind::Majority,
            pmf: pmf.iter().map(|(n, p)| (n.to_string(), *p)).collect(),
            thresholds: BTreeMap::new(),
        }
    }

    pub fn build(&self) -> Result<VotingRule> {
        let pmf = arity_keyed(&self.pmf)?;
        match self.kind {
            RuleKind::Majority => VotingRule::majority(&pmf),
            RuleKind::Custom => VotingRule::new(&pmf, &arity_keyed(&self.thresholds)?),
        }
    }
}

fn default_length() -> f64 {
    40.0
}
fn default_dx() -> f64 {
    0.05
}
fn default_t_end() -> f64 {
    400.0
}
fn default_max_length() -> f64 {
    1.0e6
}

/// `[pde]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdeSettings {
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_dx")]
    pub dx: f64,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub scheme: Scheme,
    /// Time limit for steady-state marches.
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    #[serde(default)]
    pub steady_tol: Option<f64>,
    /// Largest domain the growing-domain schedule may reach.
    #[serde(default = "default_max_length")]
    pub max_length: f64,
}

impl Default for PdeSettings {
    fn default() -> Self {
        Self {
            length: default_length(),
            dx: default_dx(),
            dt: None,
            scheme: Scheme::default(),
            t_end: default_t_end(),
            steady_tol: None,
            max_length: default_max_length(),
        }
    }
}

impl PdeSettings {
    pub fn solver(&self, gamma: f64, zeta: f64, t_end: f64) -> SolverConfig {
        let mut cfg = SolverConfig::new(gamma, zeta, t_end).scheme(self.scheme);
        if let Some(dt) = self.dt {
            cfg = cfg.dt(dt);
        }
        if let Some(tol) = self.steady_tol {
            cfg = cfg.steady_tol(tol);
        }
        cfg
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::with_spacing(self.length, self.dx)
    }
}

fn default_trials() -> u64 {
    20_000
}
fn default_cap() -> u64 {
    DEFAULT_PARTICLE_CAP
}

/// `[mc]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    #[serde(default = "default_trials")]
    pub trials: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_cap")]
    pub particle_cap: u64,
}

impl Default for McSettings {
    fn default() -> Self {
        Self {
            trials: default_trials(),
            seed: 0,
            particle_cap: default_cap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PhaseScan,
    SpeedFit,
    Crossval,
    CdfCheck,
    Certify,
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "phase_scan" => Ok(Self::PhaseScan),
            "speed_fit" => Ok(Self::SpeedFit),
            "crossval" => Ok(Self::Crossval),
            "cdf_check" => Ok(Self::CdfCheck),
            "certify" => Ok(Self::Certify),
            other => Err(Error::Config(format!("unknown experiment kind {other:?}"))),
        }
    }
}

fn default_level() -> f64 {
    0.5
}
fn default_window() -> [f64; 2] {
    [2.0, 6.0]
}
fn default_samples() -> usize {
    41
}
fn default_horizon() -> f64 {
    8.0
}

/// Parameters of the certificate chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyParams {
    /// Slope of `H` at the origin, in `(1, F'(0))`.
    pub f: f64,
    /// Contraction `B < 1/gamma`.
    pub b: f64,
    #[serde(default)]
    pub nu: f64,
    #[serde(default = "CertifyParams::default_alpha")]
    pub alpha: f64,
    #[serde(default = "CertifyParams::default_omega")]
    pub omega: f64,
    /// Right end of the checked range; `B^-40` when absent.
    #[serde(default)]
    pub x_max: Option<f64>,
    #[serde(default = "CertifyParams::default_grid_points")]
    pub grid_points: usize,
    #[serde(default = "CertifyParams::default_super_omegas")]
    pub super_omegas: Vec<f64>,
    #[serde(default = "CertifyParams::default_super_xi")]
    pub super_xi: f64,
    /// Run the `H -> v_omega -> w` chain.
    #[serde(default = "CertifyParams::default_true")]
    pub subsolution: bool,
}

impl CertifyParams {
    fn default_alpha() -> f64 {
        0.9
    }
    fn default_omega() -> f64 {
        1.0
    }
    fn default_grid_points() -> usize {
        10_000
    }
    fn default_super_omegas() -> Vec<f64> {
        vec![1.0, 0.5, 0.25]
    }
    fn default_super_xi() -> f64 {
        1.0
    }
    fn default_true() -> bool {
        true
    }

    pub fn new(f: f64, b: f64) -> Self {
        Self {
            f,
            b,
            nu: 0.0,
            alpha: Self::default_alpha(),
            omega: Self::default_omega(),
            x_max: None,
            grid_points: Self::default_grid_points(),
            super_omegas: Self::default_super_omegas(),
            super_xi: Self::default_super_xi(),
            subsolution: true,
        }
    }
}

/// `[experiment]`. Fields not used by `kind` are ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSettings {
    pub kind: ExperimentKind,
    pub zeta: f64,
    #[serde(default)]
    pub gammas: Vec<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default = "default_window")]
    pub window: [f64; 2],
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// `(t, x)` pairs for `crossval`.
    #[serde(default)]
    pub points: Vec<[f64; 2]>,
    /// Time horizon for `cdf_check`.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    /// Query points for `cdf_check`.
    #[serde(default)]
    pub query: Vec<f64>,
    #[serde(default)]
    pub certify: Option<CertifyParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rule: RuleSpec,
    #[serde(default)]
    pub pde: PdeSettings,
    #[serde(default)]
    pub mc: McSettings,
    pub experiment: ExperimentSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.rule.build()?;
        let e = &self.experiment;
        if !(e.zeta > 0.0) {
            return Err(Error::Config(format!("zeta must be positive, got {}", e.zeta)));
        }
        if e.gammas.is_empty() {
            return Err(Error::Config("experiment.gammas is empty".into()));
        }
        for &g in &e.gammas {
            self.pde.solver(g, e.zeta, self.pde.t_end).time_step(&self.pde.grid()?, 1.0)?;
        }
        match e.kind {
            ExperimentKind::Crossval if e.points.is_empty() => {
                Err(Error::Config("crossval needs experiment.points".into()))
            }
            ExperimentKind::CdfCheck if e.query.is_empty() => {
                Err(Error::Config("cdf_check needs experiment.query".into()))
            }
            ExperimentKind::Certify if e.certify.is_none() => {
                Err(Error::Config("certify needs an [experiment.certify] table".into()))
            }
            _ => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Phase scan

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseClass {
    Trivial,
    Nontrivial,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRow {
    pub gamma: f64,
    /// `max_{x <= L/2} U`.
    pub max_left: f64,
    pub class: PhaseClass,
    pub converged: bool,
    pub time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseScan {
    pub rows: Vec<PhaseRow>,
    /// Largest nontrivial `gamma` and the next trivial one above it.
    pub bracket: Option<(f64, f64)>,
    /// No trivial row is followed by a nontrivial one.
    pub monotone: bool,
    pub profiles: Vec<Field>,
}

pub fn classify(max_left: f64, xi: f64) -> PhaseClass {
    if max_left <= TRIVIAL_THRESHOLD {
        PhaseClass::Trivial
    } else if max_left >= NONTRIVIAL_FRACTION * xi {
        PhaseClass::Nontrivial
    } else {
        PhaseClass::Indeterminate
    }
}

/// Steady state of the cut-off problem for each `gamma`, classified by its
/// size on the left half of the domain.
pub fn phase_scan(g: &Nonlinearity, zeta: f64, gammas: &[f64], pde: &PdeSettings) -> Result<PhaseScan> {
    if let Some(&bad) = gammas.iter().find(|&&x| !(x > 1.0) || !x.is_finite()) {
        return Err(Error::Precondition(format!("phase scan needs gamma > 1, got {bad}")));
    }
    let xi = g.xi()?;
    let grid = pde.grid()?;
    let results: Vec<Result<(PhaseRow, Field)>> = gammas
        .par_iter()
        .map(|&gamma| {
            let s = steady_state(g, &pde.solver(gamma, zeta, pde.t_end), grid)?;
            let half = 0.5 * grid.l;
            let max_left = (0..grid.n)
                .filter(|&i| grid.x(i) <= half + 1e-12)
                .map(|i| s.field.values[i])
                .fold(0.0, f64::max);
            Ok((
                PhaseRow {
                    gamma,
                    max_left,
                    class: classify(max_left, xi),
                    converged: s.converged,
                    time: s.field.time,
                },
                s.field,
            ))
        })
        .collect();
    let mut rows = Vec::with_capacity(gammas.len());
    let mut profiles = Vec::with_capacity(gammas.len());
    for r in results {
        let (row, field) = r?;
        rows.push(row);
        profiles.push(field);
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| rows[a].gamma.total_cmp(&rows[b].gamma));
    let sorted: Vec<&PhaseRow> = order.iter().map(|&i| &rows[i]).collect();
    let monotone = !sorted.iter().enumerate().any(|(i, r)| {
        r.class == PhaseClass::Trivial && sorted[i + 1..].iter().any(|s| s.class == PhaseClass::Nontrivial)
    });
    let bracket = sorted
        .iter()
        .rposition(|r| r.class == PhaseClass::Nontrivial)
        .and_then(|i| {
            sorted[i + 1..]
                .iter()
                .find(|r| r.class == PhaseClass::Trivial)
                .map(|t| (sorted[i].gamma, t.gamma))
        });
    Ok(PhaseScan {
        rows,
        bracket,
        monotone,
        profiles,
    })
}

// ---------------------------------------------------------------------------
// Spreading rate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpreadingFit {
    pub level: f64,
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    /// Least-squares slope of `ln x_q(t)` against `t`.
    pub slope: f64,
    /// 95% Student-t half-width of the slope.
    pub half_width: f64,
    pub band: Option<SpeedPair>,
    /// Domain length at the end of the run.
    pub final_length: f64,
}

/// Smallest `x` with `u(x) = level`, by linear interpolation at the first node
/// where `u >= level`. Only interior nodes count.
pub fn level_position(field: &Field, level: f64) -> Option<f64> {
    let i = field.values.iter().position(|&u| u >= level)?;
    let dx = field.grid.dx();
    let (u0, x0) = if i == 0 { (field.left, 0.0) } else { (field.values[i - 1], field.grid.x(i - 1)) };
    let u1 = field.values[i];
    let w = if u1 > u0 { (level - u0) / (u1 - u0) } else { 1.0 };
    Some(x0 + w.clamp(0.0, 1.0) * dx)
}

fn doubled(field: &Field, dx: f64) -> Result<Field> {
    let grid = Grid::with_spacing(2.0 * field.grid.l, dx)?;
    let mut next = Field::constant(grid, field.right, field.left, field.right);
    next.values[..field.grid.n].copy_from_slice(&field.values);
    // The old right boundary becomes an interior node.
    next.values[field.grid.n] = field.right;
    next.time = field.time;
    Ok(next)
}

/// Tracks `x_q(t)` for the Cauchy problem `u(0, .) = 1`, `u(t, 0) = 0` on a domain
/// that doubles whenever `x_q > 0.4 L`, and fits the slope of `ln x_q` over the window.
pub fn speed_fit(
    g: &Nonlinearity,
    zeta: f64,
    gamma: f64,
    level: f64,
    window: [f64; 2],
    samples: usize,
    pde: &PdeSettings,
) -> Result<(SpreadingFit, Vec<Field>)> {
    if !(gamma > g.upsilon.value) {
        return Err(Error::Precondition(format!(
            "spreading fits need gamma > Upsilon = {}, got {gamma}",
            g.upsilon.value
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Precondition(format!("level must lie in (0, 1), got {level}")));
    }
    let [t0, t1] = window;
    if !(t0 > 0.0 && t1 > t0) || samples < 3 {
        return Err(Error::Config(format!(
            "need 0 < t0 < t1 and at least 3 samples, got [{t0}, {t1}] with {samples}"
        )));
    }
    let times: Vec<f64> = (0..samples)
        .map(|i| t0 + (t1 - t0) * i as f64 / (samples - 1) as f64)
        .collect();
    let cfg = pde.solver(gamma, zeta, t1).bc_right(RightBoundary::One);
    let mut field = Field::constant(pde.grid()?, 1.0, 0.0, 1.0);
    let mut solver = NonlocalSolver::new(g, &cfg, field.grid)?;
    let mut positions = Vec::with_capacity(samples);
    let mut snapshots = Vec::new();
    let snapshot_every = (samples / 4).max(1);
    for (k, &t) in times.iter().enumerate() {
        // Advance in unit-time chunks so the domain can grow in between.
        loop {
            let target = (field.time + 1.0).min(t);
            solver.advance_to(&mut field, target);
            let grow = match level_position(&field, level) {
                Some(x) => x > GROW_FRACTION * field.grid.l,
                None => true,
            };
            if grow {
                if 2.0 * field.grid.l > pde.max_length {
                    return Err(Error::LevelNotCrossed { level, time: field.time });
                }
                field = doubled(&field, pde.dx)?;
                solver = NonlocalSolver::new(g, &cfg, field.grid)?;
                continue;
            }
            if field.time >= t - 1e-12 * t.max(1.0) {
                break;
            }
        }
        let x = level_position(&field, level).ok_or(Error::LevelNotCrossed { level, time: t })?;
        positions.push(x);
        if k % snapshot_every == 0 || k + 1 == samples {
            snapshots.push(field.clone());
        }
    }
    let logs: Vec<f64> = positions.iter().map(|x| x.ln()).collect();
    let (slope, _, se) = linear_fit(&times, &logs);
    let q = StudentsT::new(0.0, 1.0, (samples - 2) as f64)
        .map(|d| d.inverse_cdf(0.975))
        .unwrap_or(1.96);
    Ok((
        SpreadingFit {
            level,
            times,
            positions,
            slope,
            half_width: q * se,
            band: g.speeds(zeta, gamma).ok(),
            final_length: field.grid.l,
        },
        snapshots,
    ))
}

// ---------------------------------------------------------------------------
// Monte Carlo against PDE

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossvalRow {
    pub t: f64,
    pub x: f64,
    pub u_pde: f64,
    pub u_mc: f64,
    pub std_error: f64,
    pub diff: f64,
    pub passed: bool,
    pub truncated: u64,
    pub unreliable: bool,
}

/// `|u_MC - u_PDE| <= 3 SE + 0.02`.
pub fn agrees(diff: f64, se: f64) -> bool {
    diff.abs() <= 3.0 * se + 0.02
}

/// PDE values at each `(t, x)` from one half-line solve, against vote-mode
/// Monte Carlo estimates of `2 P(X_t > 0) - 1` started at `x`.
pub fn crossval(
    g: &Nonlinearity,
    zeta: f64,
    gamma: f64,
    points: &[[f64; 2]],
    mc: &McSettings,
    pde: &PdeSettings,
) -> Result<Vec<CrossvalRow>> {
    if points.iter().any(|&[t, x]| !(t >= 0.0) || !(x >= 0.0) || x > pde.length) {
        return Err(Error::Precondition(format!(
            "crossval points need t >= 0 and 0 <= x <= L = {}",
            pde.length
        )));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a][0].total_cmp(&points[b][0]));
    let t_max = points.iter().map(|p| p[0]).fold(0.0, f64::max);
    let cfg = pde.solver(gamma, zeta, t_max);
    let mut field = Field::constant(pde.grid()?, 1.0, 0.0, 1.0);
    let mut solver = NonlocalSolver::new(g, &cfg, field.grid)?;
    let mut u_pde = vec![0.0; points.len()];
    for &i in &order {
        let [t, x] = points[i];
        solver.advance_to(&mut field, t);
        u_pde[i] = if t == 0.0 { if x > 0.0 { 1.0 } else { 0.0 } } else { field.at(x) };
    }
    points
        .iter()
        .zip(u_pde)
        .enumerate()
        .map(|(i, (&[t, x], up))| {
            let sim = SimConfig::new(x, gamma, zeta, t)
                .seed(mc.seed.wrapping_add(i as u64))
                .cap(mc.particle_cap);
            let est = estimate_u(&g.rule, &sim, mc.trials)?;
            let diff = est.mean - up;
            Ok(CrossvalRow {
                t,
                x,
                u_pde: up,
                u_mc: est.mean,
                std_error: est.std_error,
                diff,
                passed: agrees(diff, est.std_error) && !est.unreliable,
                truncated: est.truncated,
                unreliable: est.unreliable,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfRow {
    pub x: f64,
    pub p_mc: f64,
    pub std_error: f64,
    /// `(1 + U(x)) / 2` with `U(-x) = -U(x)`.
    pub p_pde: f64,
    pub diff: f64,
    pub passed: bool,
    pub truncated: u64,
}

/// `U(x)` for `x` of either sign, by oddness, and `U = 1` past the cut-off.
pub fn odd_extension(profile: &Field, x: f64) -> f64 {
    let s = if x > profile.grid.l { profile.right } else { profile.at(x.abs()) };
    s.copysign(x) * if x == 0.0 { 0.0 } else { 1.0 }
}

/// Empirical `P(X_t <= x)` of the root value against `(1 + U_inf(x)) / 2`.
pub fn cdf_check(
    g: &Nonlinearity,
    zeta: f64,
    gamma: f64,
    horizon: f64,
    query: &[f64],
    mc: &McSettings,
    pde: &PdeSettings,
) -> Result<(Vec<CdfRow>, Field)> {
    if !g.rule.odd_symmetric() || (g.xi()? - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(
            "the value distribution check needs an odd rule with Xi = 1".into(),
        ));
    }
    if !(gamma < g.fprime0) {
        return Err(Error::Precondition(format!(
            "cdf check needs gamma < F'(0) = {}, got {gamma}",
            g.fprime0
        )));
    }
    let steady = steady_state(g, &pde.solver(gamma, zeta, pde.t_end), pde.grid()?)?;
    let sim = SimConfig::new(0.0, gamma, zeta, horizon)
        .seed(mc.seed)
        .cap(mc.particle_cap);
    let est = estimate_value_cdf(&g.rule, &sim, mc.trials, query)?;
    let rows = est
        .points
        .iter()
        .map(|p| {
            let p_pde = 0.5 * (1.0 + odd_extension(&steady.field, p.x));
            let diff = p.p - p_pde;
            CdfRow {
                x: p.x,
                p_mc: p.p,
                std_error: p.std_error,
                p_pde,
                diff,
                passed: agrees(diff, p.std_error),
                truncated: p.truncated,
            }
        })
        .collect();
    Ok((rows, steady.field))
}

// ---------------------------------------------------------------------------
// Certificates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupersolutionSweep {
    pub omega: f64,
    /// `zeta (1 - Upsilon gamma^-omega)`.
    pub delta_star: f64,
    pub at_bound: SupersolutionReport,
    /// The report at `1.1 delta_star`.
    pub over_bound: SupersolutionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsolutionChain {
    pub h: HReport,
    pub h_linear_end: f64,
    pub h_tail_start: f64,
    pub v_omega: VOmega,
    pub w: Scaffold,
    pub report: SubsolutionReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifyBundle {
    pub gamma: f64,
    pub zeta: f64,
    pub params: CertifyParams,
    pub supersolution: Vec<SupersolutionSweep>,
    pub subsolution: Option<SubsolutionChain>,
    pub passed: bool,
}

fn context(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Construction(m) => Error::Construction(format!("{stage}: {m}")),
        Error::Precondition(m) => Error::Precondition(format!("{stage}: {m}")),
        other => other,
    }
}

/// Grid of the subsolution check: half uniform on `(0, 1/B)`, half geometric
/// on `[1/B, x_max]`, all offset from the breakpoints.
pub fn subsolution_grid(b: f64, x_max: f64, n: usize) -> Vec<f64> {
    let mut xs = offset_grid(0.0, 1.0 / b, n / 2);
    xs.extend(log_offset_grid(1.0 / b, x_max, n - n / 2));
    xs
}

/// Supersolution sweeps (when `gamma > Upsilon`) and the `H -> v_omega -> w`
/// subsolution chain with its inequality check.
pub fn certify(g: &Nonlinearity, zeta: f64, gamma: f64, params: &CertifyParams) -> Result<CertifyBundle> {
    let upsilon = g.upsilon.value;
    let mut supersolution = Vec::new();
    if gamma > upsilon {
        let xs = offset_grid(0.0, 50.0, 10_000);
        for &omega in &params.super_omegas {
            let delta_star = zeta * (1.0 - upsilon * gamma.powf(-omega));
            let run = |d| check_supersolution(d, params.super_xi, omega, g, zeta, gamma, &xs);
            supersolution.push(SupersolutionSweep {
                omega,
                delta_star,
                at_bound: run(delta_star).map_err(context("supersolution"))?,
                over_bound: run(1.1 * delta_star).map_err(context("supersolution"))?,
            });
        }
    }
    let subsolution = if params.subsolution {
        let b = params.b;
        if !(b > 0.0 && b < 1.0 / gamma) {
            return Err(Error::Precondition(format!(
                "B = {b} must lie in (0, 1/gamma) = (0, {})",
                1.0 / gamma
            )));
        }
        let s = sigma(params.f, 1.0 / b).map_err(context("sigma"))?.value;
        if !(params.nu > zeta * s) {
            return Err(Error::Precondition(format!(
                "nu = {} must exceed zeta Sigma(f, 1/B) = {}",
                params.nu,
                zeta * s
            )));
        }
        let xi = g.xi()?;
        let h = build_h(g, xi, params.f).map_err(context("H"))?;
        let v = build_v_omega(b, params.f, params.nu / zeta, params.alpha, params.omega)
            .map_err(context("v_omega"))?;
        let omega0 = -params.f.ln() / b.ln();
        if !(v.m_omega < v.omega / params.alpha && v.omega / params.alpha < omega0) {
            return Err(Error::Construction(format!(
                "w: need m_omega < omega/alpha < omega0, got {} < {} < {omega0}",
                v.m_omega,
                v.omega / params.alpha
            )));
        }
        let x_max = params.x_max.unwrap_or(b.powi(-40));
        let w = build_w(&h, b, &v, h.delta, x_max).map_err(context("w"))?;
        let xs = subsolution_grid(b, x_max, params.grid_points);
        let onset = second_order_onset(&w.func, g, zeta, gamma, params.nu, &xs);
        let report = check_subsolution_inequality(&w.func, g, zeta, gamma, params.nu, &xs, onset);
        Some(SubsolutionChain {
            h: h.validate(g),
            h_linear_end: h.linear_end,
            h_tail_start: h.tail_start,
            v_omega: v,
            w,
            report,
        })
    } else {
        None
    };
    let passed = supersolution
        .iter()
        .all(|s| s.at_bound.passed && (s.delta_star <= 0.0 || !s.over_bound.passed))
        && subsolution.as_ref().map_or(true, |c| c.report.passed);
    Ok(CertifyBundle {
        gamma,
        zeta,
        params: params.clone(),
        supersolution,
        subsolution,
        passed,
    })
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kind: ExperimentKind,
    pub config: ExperimentConfig,
    pub build: String,
    pub wall_seconds: f64,
    pub checks: usize,
    pub failures: usize,
    pub passed: bool,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Outputs<'_> {
    fn create(&mut self, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
        self.files.push(name.to_string());
        Ok(std::io::BufWriter::new(std::fs::File::create(self.dir.join(name))?))
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }
}

/// Runs the configured experiment, writing CSV tables and `summary.json` into `out_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, build: &str) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let start = Instant::now();
    let g = Nonlinearity::new(cfg.rule.build()?);
    let e = &cfg.experiment;
    let mut out = Outputs {
        dir: out_dir,
        files: Vec::new(),
    };
    let mut checks = 0usize;
    let mut failures = 0usize;
    let mut notes = Vec::new();
    let mut tally = |ok: bool| {
        checks += 1;
        if !ok {
            failures += 1;
        }
    };

    match e.kind {
        ExperimentKind::PhaseScan => {
            let scan = phase_scan(&g, e.zeta, &e.gammas, &cfg.pde)?;
            let mut w = out.create("phase_scan.csv")?;
            writeln!(w, "gamma,max_left,class,converged,t")?;
            for r in &scan.rows {
                let class = serde_json::to_value(r.class)?;
                writeln!(
                    w,
                    "{},{},{},{},{}",
                    r.gamma,
                    r.max_left,
                    class.as_str().unwrap_or_default(),
                    r.converged,
                    r.time
                )?;
                tally(r.converged);
                if !r.converged {
                    notes.push(format!("steady state at gamma = {} did not converge", r.gamma));
                }
            }
            w.flush()?;
            for (r, f) in scan.rows.iter().zip(&scan.profiles) {
                write_profile_csv(&out.path(&format!("profile_gamma_{}.csv", r.gamma)), f)?;
            }
            tally(scan.monotone);
            match scan.bracket {
                Some((lo, hi)) => notes.push(format!("transition bracket ({lo}, {hi})")),
                None => notes.push("no transition bracket found".into()),
            }
        }
        ExperimentKind::SpeedFit => {
            let mut w = out.create("speed_fit.csv")?;
            writeln!(w, "gamma,t,x_q,log_x_q")?;
            let mut fits = out.create("speed_fit_summary.csv")?;
            writeln!(fits, "gamma,level,slope,half_width,c_under,c_over,final_length")?;
            for &gamma in &e.gammas {
                let (fit, snaps) = speed_fit(&g, e.zeta, gamma, e.level, e.window, e.samples, &cfg.pde)?;
                for (t, x) in fit.times.iter().zip(&fit.positions) {
                    writeln!(w, "{gamma},{t},{x},{}", x.ln())?;
                }
                let (lo, hi) = fit.band.map_or((f64::NAN, f64::NAN), |b| (b.c_under, b.c_over));
                writeln!(
                    fits,
                    "{gamma},{},{},{},{lo},{hi},{}",
                    fit.level, fit.slope, fit.half_width, fit.final_length
                )?;
                if fit.band.is_some() {
                    tally(fit.slope >= lo - 0.25 * lo.abs() && fit.slope <= hi + 0.25 * hi.abs());
                }
                let mut p = out.create(&format!("rescaled_profiles_gamma_{gamma}.csv"))?;
                writeln!(p, "t,x,u,x_rescaled")?;
                for f in &snaps {
                    let scale = (-fit.slope * f.time).exp();
                    for j in 0..=f.grid.n + 1 {
                        let x = j as f64 * f.grid.dx();
                        writeln!(p, "{},{x},{},{}", f.time, f.node(j), x * scale)?;
                    }
                }
                p.flush()?;
            }
            w.flush()?;
            fits.flush()?;
        }
        ExperimentKind::Crossval => {
            let mut w = out.create("crossval.csv")?;
            writeln!(w, "gamma,t,x,u_pde,u_mc,se,diff,pass,truncated")?;
            for &gamma in &e.gammas {
                for r in crossval(&g, e.zeta, gamma, &e.points, &cfg.mc, &cfg.pde)? {
                    writeln!(
                        w,
                        "{gamma},{},{},{},{},{},{},{},{}",
                        r.t, r.x, r.u_pde, r.u_mc, r.std_error, r.diff, r.passed, r.truncated
                    )?;
                    tally(r.passed);
                    if r.unreliable {
                        notes.push(format!("truncation at gamma = {gamma}, (t, x) = ({}, {})", r.t, r.x));
                    }
                }
            }
            w.flush()?;
        }
        ExperimentKind::CdfCheck => {
            let mut w = out.create("cdf_check.csv")?;
            writeln!(w, "gamma,x,p_mc,se,p_pde,diff,pass,truncated")?;
            for &gamma in &e.gammas {
                let (rows, profile) = cdf_check(&g, e.zeta, gamma, e.horizon, &e.query, &cfg.mc, &cfg.pde)?;
                for r in rows {
                    writeln!(
                        w,
                        "{gamma},{},{},{},{},{},{},{}",
                        r.x, r.p_mc, r.std_error, r.p_pde, r.diff, r.passed, r.truncated
                    )?;
                    tally(r.passed);
                }
                write_profile_csv(&out.path(&format!("profile_gamma_{gamma}.csv")), &profile)?;
            }
            w.flush()?;
        }
        ExperimentKind::Certify => {
            let params = e.certify.as_ref().expect("validated");
            for &gamma in &e.gammas {
                let bundle = certify(&g, e.zeta, gamma, params)?;
                tally(bundle.passed);
                let json = serde_json::to_string_pretty(&bundle)?;
                std::fs::write(out.path(&format!("certificate_gamma_{gamma}.json")), json)?;
                if let Some(chain) = &bundle.subsolution {
                    let x_max = chain.w.func.x_max;
                    let xs = subsolution_grid(params.b, x_max, 2000);
                    write_piecewise_csv(&out.path(&format!("w_gamma_{gamma}.csv")), &chain.w.func, &xs)?;
                    if let Some(m) = chain.report.m_report {
                        notes.push(format!("second-order residual nonnegative for x >= {m:.4} (gamma = {gamma})"));
                    }
                }
            }
        }
    }

    let summary = RunSummary {
        kind: e.kind,
        config: cfg.clone(),
        build: build.to_string(),
        wall_seconds: start.elapsed().as_secs_f64(),
        checks,
        failures,
        passed: failures == 0,
        outputs: out.files,
        notes,
    };
    std::fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
