//! Finite differences for `u_t = u_xx / 2 + zeta [G(u(t, x / gamma)) - u]` on `[0, L]`
//! with Dirichlet data, and for the local model
//! `u_t = e^(-2 nu t) u_xx / 2 - (b - nu) x u_x + zeta f(u)`.
//!
//! Interior points are `x_i = (i + 1) dx`, `i = 0..n`, with `dx = L / (n + 1)`.
//! `u(x_i / gamma)` is read off the grid by linear interpolation, which keeps the
//! explicit update a convex combination of old values.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonlinearity::Nonlinearity;

pub const MIN_INTERIOR: usize = 16;
pub const DEFAULT_STEADY_TOL: f64 = 1e-8;
/// Fraction of the stability limit used when no time step is given.
const CFL_SAFETY: f64 = 0.9;

/// An increasing (for the nonlocal problem) Lipschitz reaction term.
pub trait Reaction: Sync {
    fn value(&self, u: f64) -> f64;
    /// Upper bound on `|G'|` over `[-1, 1]`.
    fn lipschitz(&self) -> f64;
}

impl Reaction for Nonlinearity {
    #[inline]
    fn value(&self, u: f64) -> f64 {
        self.f(u)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz_bound
    }
}

/// `G(u) = slope * u`.
#[derive(Debug, Clone, Copy)]
pub struct Linear(pub f64);

impl Reaction for Linear {
    fn value(&self, u: f64) -> f64 {
        self.0 * u
    }

    fn lipschitz(&self) -> f64 {
        self.0.abs()
    }
}

/// A closure with a declared Lipschitz bound.
pub struct FnReaction<F> {
    f: F,
    lipschitz: f64,
}

impl<F: Fn(f64) -> f64 + Sync> FnReaction<F> {
    pub fn new(f: F, lipschitz: f64) -> Self {
        Self { f, lipschitz }
    }
}

impl<F: Fn(f64) -> f64 + Sync> Reaction for FnReaction<F> {
    fn value(&self, u: f64) -> f64 {
        (self.f)(u)
    }

    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub l: f64,
    pub n: usize,
}

impl Grid {
    pub fn new(l: f64, n: usize) -> Result<Self> {
        if !(l > 0.0) || !l.is_finite() {
            return Err(Error::Config(format!("domain length must be positive, got {l}")));
        }
        if n < MIN_INTERIOR {
            return Err(Error::Config(format!(
                "need at least {MIN_INTERIOR} interior points, got {n}"
            )));
        }
        Ok(Self { l, n })
    }

    /// Grid on `[0, l]` whose spacing is `dx` (rounded to divide `l`).
    pub fn with_spacing(l: f64, dx: f64) -> Result<Self> {
        let cells = (l / dx).round() as usize;
        Self::new(l, cells.saturating_sub(1))
    }

    #[inline]
    pub fn dx(&self) -> f64 {
        self.l / (self.n + 1) as f64
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.dx()
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub grid: Grid,
    /// Interior values `u(x_i)`.
    pub values: Vec<f64>,
    pub time: f64,
    /// Dirichlet data at `0` and `L`.
    pub left: f64,
    pub right: f64,
}

impl Field {
    pub fn constant(grid: Grid, value: f64, left: f64, right: f64) -> Self {
        Self {
            grid,
            values: vec![value; grid.n],
            time: 0.0,
            left,
            right,
        }
    }

    /// `u` at node `j` of the full grid `0, dx, ..., L`.
    #[inline]
    pub fn node(&self, j: usize) -> f64 {
        if j == 0 {
            self.left
        } else if j > self.grid.n {
            self.right
        } else {
            self.values[j - 1]
        }
    }

    /// Piecewise-linear interpolant on `[0, L]`, clamped outside.
    pub fn at(&self, x: f64) -> f64 {
        let s = (x / self.grid.dx()).clamp(0.0, (self.grid.n + 1) as f64);
        let j = (s.floor() as usize).min(self.grid.n);
        let w = s - j as f64;
        (1.0 - w) * self.node(j) + w * self.node(j + 1)
    }

    pub fn max_abs_diff(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Forward Euler, centered second difference, linear interpolation.
    #[default]
    ExplicitMonotone,
    /// Backward Euler diffusion, explicit reaction and nonlocal term.
    Imex,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightBoundary {
    #[default]
    One,
    Zero,
}

impl RightBoundary {
    pub fn value(self) -> f64 {
        match self {
            Self::One => 1.0,
            Self::Zero => 0.0,
        }
    }
}

fn default_steady_tol() -> f64 {
    DEFAULT_STEADY_TOL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub gamma: f64,
    pub zeta: f64,
    /// Time step; chosen from the stability limit when absent.
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub scheme: Scheme,
    pub t_end: f64,
    #[serde(default = "default_steady_tol")]
    pub steady_tol: f64,
    #[serde(default)]
    pub bc_right: RightBoundary,
}

impl SolverConfig {
    pub fn new(gamma: f64, zeta: f64, t_end: f64) -> Self {
        Self {
            gamma,
            zeta,
            dt: None,
            scheme: Scheme::ExplicitMonotone,
            t_end,
            steady_tol: DEFAULT_STEADY_TOL,
            bc_right: RightBoundary::One,
        }
    }

    pub fn dt(mut self, dt: f64) -> Self {
        self.dt = Some(dt);
        self
    }

    pub fn scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn bc_right(mut self, bc: RightBoundary) -> Self {
        self.bc_right = bc;
        self
    }

    pub fn steady_tol(mut self, tol: f64) -> Self {
        self.steady_tol = tol;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be at least 1, got {}", self.gamma)));
        }
        if !(self.zeta > 0.0) || !self.zeta.is_finite() {
            return Err(Error::Config(format!("zeta must be positive, got {}", self.zeta)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0) {
                return Err(Error::Config(format!("dt must be positive, got {dt}")));
            }
        }
        Ok(())
    }

    /// Largest step for which the chosen scheme is monotone on `grid`.
    pub fn stability_limit(&self, grid: &Grid, lipschitz: f64) -> f64 {
        let reaction = self.zeta * lipschitz.max(1.0);
        match self.scheme {
            Scheme::ExplicitMonotone => 1.0 / (1.0 / (grid.dx() * grid.dx()) + reaction),
            Scheme::Imex => 1.0 / reaction,
        }
    }

    /// The configured step, or a safe fraction of the stability limit.
    pub fn time_step(&self, grid: &Grid, lipschitz: f64) -> Result<f64> {
        self.validate()?;
        let limit = self.stability_limit(grid, lipschitz);
        match self.dt {
            Some(dt) if dt > limit * (1.0 + 1e-12) => Err(Error::Stability(format!(
                "dt = {dt} exceeds the monotonicity limit {limit} (dx = {})",
                grid.dx()
            ))),
            Some(dt) => Ok(dt),
            None => Ok(CFL_SAFETY * limit),
        }
    }
}

/// Interpolation stencil for `u(x_i / gamma)`: full-grid node index and weight.
#[derive(Debug, Clone)]
pub struct Stencil {
    gamma: f64,
    n: usize,
    taps: Vec<(usize, f64)>,
}

impl Stencil {
    pub fn new(grid: &Grid, gamma: f64) -> Self {
        let taps = (0..grid.n)
            .map(|i| {
                let s = (i + 1) as f64 / gamma;
                let j = s.floor() as usize;
                (j, s - j as f64)
            })
            .collect();
        Self {
            gamma,
            n: grid.n,
            taps,
        }
    }

    fn matches(&self, grid: &Grid, gamma: f64) -> bool {
        self.n == grid.n && self.gamma == gamma
    }

    #[inline]
    fn eval(&self, field: &Field, i: usize) -> f64 {
        let (j, w) = self.taps[i];
        if w == 0.0 {
            field.node(j)
        } else {
            (1.0 - w) * field.node(j) + w * field.node(j + 1)
        }
    }
}

/// Discrete operator `u_xx / 2 + zeta [G(u(x / gamma)) - u]` at every interior node.
fn nonlocal_operator<R: Reaction + ?Sized>(
    field: &Field,
    g: &R,
    zeta: f64,
    stencil: &Stencil,
    out: &mut Vec<f64>,
) {
    let dx = field.grid.dx();
    let half_inv_dx2 = 0.5 / (dx * dx);
    out.clear();
    out.extend((0..field.grid.n).map(|i| {
        let lap = field.node(i) - 2.0 * field.node(i + 1) + field.node(i + 2);
        half_inv_dx2 * lap + zeta * (g.value(stencil.eval(field, i)) - field.values[i])
    }));
}

/// Solver state reused across steps.
pub struct NonlocalSolver<'a, R: Reaction + ?Sized> {
    g: &'a R,
    cfg: SolverConfig,
    grid: Grid,
    dt: f64,
    stencil: Stencil,
    work: Vec<f64>,
    tri: Vec<f64>,
}

impl<'a, R: Reaction + ?Sized> NonlocalSolver<'a, R> {
    pub fn new(g: &'a R, cfg: &SolverConfig, grid: Grid) -> Result<Self> {
        let dt = cfg.time_step(&grid, g.lipschitz())?;
        Ok(Self {
            g,
            cfg: cfg.clone(),
            grid,
            dt,
            stencil: Stencil::new(&grid, cfg.gamma),
            work: Vec::with_capacity(grid.n),
            tri: Vec::with_capacity(grid.n),
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances `field` by `h <= dt` in place.
    pub fn step_by(&mut self, field: &mut Field, h: f64) {
        debug_assert!(self.stencil.matches(&field.grid, self.cfg.gamma));
        match self.cfg.scheme {
            Scheme::ExplicitMonotone => {
                nonlocal_operator(field, self.g, self.cfg.zeta, &self.stencil, &mut self.work);
                for (u, r) in field.values.iter_mut().zip(&self.work) {
                    *u += h * r;
                }
            }
            Scheme::Imex => {
                let zeta = self.cfg.zeta;
                self.work.clear();
                for i in 0..field.grid.n {
                    let u = field.values[i];
                    self.work
                        .push(u + h * zeta * (self.g.value(self.stencil.eval(field, i)) - u));
                }
                let a = 0.5 * h / (self.grid.dx() * self.grid.dx());
                self.work[0] += a * field.left;
                let last = field.grid.n - 1;
                self.work[last] += a * field.right;
                solve_tridiagonal(a, &mut self.work, &mut self.tri);
                field.values.copy_from_slice(&self.work);
            }
        }
        field.time += h;
    }

    pub fn step(&mut self, field: &mut Field) {
        let dt = self.dt;
        self.step_by(field, dt);
    }

    /// Steps until `field.time` reaches `t` exactly.
    pub fn advance_to(&mut self, field: &mut Field, t: f64) {
        while field.time < t - 1e-12 * t.max(1.0) {
            let h = self.dt.min(t - field.time);
            self.step_by(field, h);
        }
        field.time = field.time.max(t);
    }
}

/// Solves `(1 + 2a) x_i - a x_(i-1) - a x_(i+1) = rhs_i` in place (Thomas algorithm).
fn solve_tridiagonal(a: f64, rhs: &mut [f64], c: &mut Vec<f64>) {
    let n = rhs.len();
    let b = 1.0 + 2.0 * a;
    c.clear();
    c.resize(n, 0.0);
    c[0] = -a / b;
    rhs[0] /= b;
    for i in 1..n {
        let m = b + a * c[i - 1];
        c[i] = -a / m;
        rhs[i] = (rhs[i] + a * rhs[i - 1]) / m;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// One step of the nonlocal problem with the configured Dirichlet data.
pub fn step_nonlocal<R: Reaction + ?Sized>(field: &Field, g: &R, cfg: &SolverConfig) -> Result<Field> {
    let mut solver = NonlocalSolver::new(g, cfg, field.grid)?;
    let mut next = field.clone();
    solver.step(&mut next);
    Ok(next)
}

/// Integrates from `u(0, .) = 1`, `u(t, 0) = 0`, returning a field at each snapshot time.
pub fn solve_cauchy<R: Reaction + ?Sized>(
    g: &R,
    cfg: &SolverConfig,
    grid: Grid,
    snapshot_times: &[f64],
) -> Result<Vec<Field>> {
    if snapshot_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config("snapshot times must be nondecreasing".into()));
    }
    if let Some(&t) = snapshot_times.last() {
        if t > cfg.t_end + 1e-12 || snapshot_times[0] < 0.0 {
            return Err(Error::Config(format!(
                "snapshot times must lie in [0, t_end = {}]",
                cfg.t_end
            )));
        }
    }
    let mut solver = NonlocalSolver::new(g, cfg, grid)?;
    let mut field = Field::constant(grid, 1.0, 0.0, cfg.bc_right.value());
    let mut out = Vec::with_capacity(snapshot_times.len());
    for &t in snapshot_times {
        solver.advance_to(&mut field, t);
        out.push(field.clone());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub field: Field,
    pub converged: bool,
    /// Last value of `max |u_new - u| / dt`.
    pub rate: f64,
}

/// Time-marches from `u = 1` until `max |u_new - u| / dt < steady_tol` or `t_end`.
pub fn steady_state<R: Reaction + ?Sized>(g: &R, cfg: &SolverConfig, grid: Grid) -> Result<SteadyState> {
    if cfg.bc_right != RightBoundary::One {
        return Err(Error::Precondition(
            "steady states are computed for the cut-off problem (bc_right = one)".into(),
        ));
    }
    let field = Field::constant(grid, 1.0, 0.0, 1.0);
    march_to_steady(g, cfg, field)
}

/// As [`steady_state`], starting from an arbitrary field.
pub fn march_to_steady<R: Reaction + ?Sized>(
    g: &R,
    cfg: &SolverConfig,
    mut field: Field,
) -> Result<SteadyState> {
    let mut solver = NonlocalSolver::new(g, cfg, field.grid)?;
    let dt = solver.dt();
    let mut prev = field.values.clone();
    let mut rate = f64::INFINITY;
    while field.time < cfg.t_end {
        solver.step(&mut field);
        rate = field
            .values
            .iter()
            .zip(&prev)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
            / dt;
        if rate < cfg.steady_tol {
            return Ok(SteadyState {
                field,
                converged: true,
                rate,
            });
        }
        prev.copy_from_slice(&field.values);
    }
    Ok(SteadyState {
        field,
        converged: false,
        rate,
    })
}

/// `U_xx / 2 + zeta [G(U(x / gamma)) - U]` at each interior node.
pub fn residual_nonlocal<R: Reaction + ?Sized>(field: &Field, g: &R, cfg: &SolverConfig) -> Vec<f64> {
    let stencil = Stencil::new(&field.grid, cfg.gamma);
    let mut out = Vec::with_capacity(field.grid.n);
    nonlocal_operator(field, g, cfg.zeta, &stencil, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub max_residual: f64,
    pub l2_residual: f64,
    pub time: f64,
}

impl ResidualReport {
    pub fn new(field: &Field, residual: &[f64]) -> Self {
        let dx = field.grid.dx();
        Self {
            max_residual: residual.iter().fold(0.0, |m, r| m.max(r.abs())),
            l2_residual: (dx * residual.iter().map(|r| r * r).sum::<f64>()).sqrt(),
            time: field.time,
        }
    }
}

/// Parameters of the local model `u_t = e^(-2 nu t) u_xx / 2 - (b - nu) x u_x + zeta f(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalModel {
    pub nu: f64,
    pub b: f64,
    pub zeta: f64,
}

impl LocalModel {
    /// Largest monotone explicit step on `grid`.
    pub fn stability_limit(&self, grid: &Grid, lipschitz: f64) -> f64 {
        let dx = grid.dx();
        let drift = (self.b - self.nu).abs() * grid.l / dx;
        1.0 / (1.0 / (dx * dx) + drift + self.zeta * lipschitz.max(1.0))
    }
}

/// One explicit step of the local model: centered diffusion with the coefficient at the
/// step midpoint, advection upwinded by the sign of `b - nu`.
pub fn step_local_model<R: Reaction + ?Sized>(
    field: &Field,
    f: &R,
    model: &LocalModel,
    dt: f64,
) -> Result<Field> {
    if model.nu < 0.0 {
        return Err(Error::Config(format!("nu must be nonnegative, got {}", model.nu)));
    }
    let limit = model.stability_limit(&field.grid, f.lipschitz());
    if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
        return Err(Error::Stability(format!(
            "dt = {dt} violates the upwind limit {limit}"
        )));
    }
    let dx = field.grid.dx();
    let diff = 0.5 * (-2.0 * model.nu * (field.time + 0.5 * dt)).exp() / (dx * dx);
    let v = model.b - model.nu;
    let mut next = field.clone();
    for i in 0..field.grid.n {
        let (um, u, up) = (field.node(i), field.node(i + 1), field.node(i + 2));
        let x = field.grid.x(i);
        // -(b - nu) x u_x with the difference taken against the characteristic direction.
        let adv = if v >= 0.0 {
            -v * x * (u - um) / dx
        } else {
            -v * x * (up - u) / dx
        };
        next.values[i] = u + dt * (diff * (um - 2.0 * u + up) + adv + model.zeta * f.value(u));
    }
    next.time += dt;
    Ok(next)
}

/// Integrates the local model from `u(0, .) = 1` and records `u` at the given times.
pub fn solve_local_model<R: Reaction + ?Sized>(
    f: &R,
    model: &LocalModel,
    grid: Grid,
    right: f64,
    dt: Option<f64>,
    snapshot_times: &[f64],
) -> Result<Vec<Field>> {
    let dt = dt.unwrap_or(CFL_SAFETY * model.stability_limit(&grid, f.lipschitz()));
    let mut field = Field::constant(grid, 1.0, 0.0, right);
    let mut out = Vec::with_capacity(snapshot_times.len());
    for &t in snapshot_times {
        while field.time < t - 1e-12 * t.max(1.0) {
            let h = dt.min(t - field.time);
            field = step_local_model(&field, f, model, h)?;
        }
        out.push(field.clone());
    }
    Ok(out)
}

/// Snapshot rows `t,x,u`, boundary nodes included.
pub fn write_snapshots_csv(path: &Path, fields: &[Field]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "t,x,u")?;
    for f in fields {
        for j in 0..=f.grid.n + 1 {
            writeln!(out, "{},{},{}", f.time, j as f64 * f.grid.dx(), f.node(j))?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Steady-state rows `x,U`, boundary nodes included.
pub fn write_profile_csv(path: &Path, field: &Field) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,U")?;
    for j in 0..=field.grid.n + 1 {
        writeln!(out, "{},{}", j as f64 * field.grid.dx(), field.node(j))?;
    }
    out.flush()?;
    Ok(())
}
