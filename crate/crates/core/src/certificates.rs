//! Barrier functions for the nonlocal equation and grid checks of the
//! inequalities they must satisfy.
//!
//! Supersolutions are the power laws `e^{-delta t} xi x^omega`. Subsolutions are
//! assembled from three pieces: a tamed nonlinearity `H` below `F`, a family of
//! base functions `v_omega` on `[0, 1]`, and the self-similar scaffold
//! `w(x) = H(w(Bx))`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonlinearity::{Nonlinearity, SCAN_POINTS};
use crate::numeric::grid_sup;

/// A report passes when its minimum residual is at least `-CERT_TOL`.
pub const CERT_TOL: f64 = 1e-8;
/// Slack used on closed-form evaluations inside the `v_omega` descent.
pub const CLOSED_FORM_TOL: f64 = 1e-12;
/// Times at which the supersolution residual is evaluated with the exact `F`.
pub const SUPER_TIMES: [f64; 3] = [0.0, 1.0, 5.0];

const CONTINUITY_TOL: f64 = 1e-10;
const JUMP_TOL: f64 = 1e-12;
const TAIL_CELLS: usize = 2048;
const H_CHECK_POINTS: usize = 10_000;

/// Minimum of a residual over a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertificateReport {
    pub min_residual: f64,
    pub argmin_x: f64,
    pub grid_size: usize,
    pub passed: bool,
}

impl CertificateReport {
    pub fn from_residuals<I: IntoIterator<Item = (f64, f64)>>(pairs: I) -> Self {
        let mut min_residual = f64::INFINITY;
        let mut argmin_x = f64::NAN;
        let mut grid_size = 0;
        for (x, r) in pairs {
            grid_size += 1;
            // NaN counts as a violation.
            if !(r >= min_residual) {
                min_residual = if r.is_nan() { f64::NEG_INFINITY } else { r };
                argmin_x = x;
            }
        }
        Self {
            min_residual,
            argmin_x,
            grid_size,
            passed: min_residual >= -CERT_TOL,
        }
    }
}

/// `lo + (i + 1/2) (hi - lo) / n` for `i < n`.
pub fn offset_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let h = (hi - lo) / n as f64;
    (0..n).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

/// Geometric analogue of [`offset_grid`] on `[lo, hi]`, `lo > 0`.
pub fn log_offset_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    offset_grid(lo.ln(), hi.ln(), n).into_iter().map(f64::exp).collect()
}

// ---------------------------------------------------------------------------
// Supersolution

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedReport {
    pub t: f64,
    pub report: CertificateReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupersolutionReport {
    pub delta: f64,
    pub xi: f64,
    pub omega: f64,
    /// `F` replaced by its linear majorant `Upsilon v` at `t = 0`.
    pub linear_bound: CertificateReport,
    /// Exact `F` at each of [`SUPER_TIMES`].
    pub exact: Vec<TimedReport>,
    pub passed: bool,
}

/// Residual `d_t v - v''/2 - zeta [F(v(t, x/gamma)) - v(t, x)]` of
/// `v = e^{-delta t} xi x^omega` on `x_grid`.
pub fn check_supersolution(
    delta: f64,
    xi: f64,
    omega: f64,
    g: &Nonlinearity,
    zeta: f64,
    gamma: f64,
    x_grid: &[f64],
) -> Result<SupersolutionReport> {
    if !(omega > 0.0 && omega <= 1.0) {
        return Err(Error::Domain {
            value: omega,
            domain: "(0, 1]",
        });
    }
    if !(xi > 0.0) {
        return Err(Error::Precondition(format!("xi must be positive, got {xi}")));
    }
    if x_grid.is_empty() || x_grid.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::Precondition("supersolution grid must be positive".into()));
    }
    let upsilon = g.upsilon.value;
    let diffusion = |x: f64| 0.5 * omega * (1.0 - omega) * x.powf(omega - 2.0);
    let slack = zeta * (1.0 - upsilon * gamma.powf(-omega)) - delta;
    let linear_bound = CertificateReport::from_residuals(
        x_grid
            .iter()
            .map(|&x| (x, xi * (x.powf(omega) * slack + diffusion(x)))),
    );
    let exact = SUPER_TIMES
        .iter()
        .map(|&t| {
            let s = (-delta * t).exp() * xi;
            let report = CertificateReport::from_residuals(x_grid.iter().map(|&x| {
                let v = s * x.powf(omega);
                let v_far = s * (x / gamma).powf(omega);
                let r = -delta * v + s * diffusion(x) - zeta * (g.f(v_far) - v);
                (x, r)
            }));
            TimedReport { t, report }
        })
        .collect::<Vec<_>>();
    let passed = linear_bound.passed && exact.iter().all(|r| r.report.passed);
    Ok(SupersolutionReport {
        delta,
        xi,
        omega,
        linear_bound,
        exact,
        passed,
    })
}

// ---------------------------------------------------------------------------
// The tamed nonlinearity H

/// `h(s) = slope s + h0(s)` where `h0'' = k` is the piecewise-linear
/// interpolant of a running minimum, integrated exactly twice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ConvexTail {
    slope: f64,
    ds: f64,
    k: Vec<f64>,
    d1: Vec<f64>,
    d0: Vec<f64>,
}

impl ConvexTail {
    /// Values `[h, h', h'']` at `s >= 0`.
    fn jet(&self, s: f64) -> [f64; 3] {
        let cells = self.k.len() - 1;
        let j = ((s / self.ds).floor().max(0.0) as usize).min(cells - 1);
        let r = s - j as f64 * self.ds;
        let k0 = self.k[j];
        let dk = (self.k[j + 1] - k0) / self.ds;
        let h0 = self.d0[j] + self.d1[j] * r + 0.5 * k0 * r * r + dk * r * r * r / 6.0;
        let h1 = self.d1[j] + k0 * r + 0.5 * dk * r * r;
        let h2 = k0 + dk * r;
        [self.slope * s + h0, self.slope + h1, h2]
    }
}

/// A `C^2` increasing map of `[0, Xi]` with `u < H(u) <= F(u)` inside, linear
/// with slope `f_slope` on `[0, linear_end]` and convex on `[tail_start, Xi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HFunction {
    pub f_slope: f64,
    pub xi: f64,
    /// `min(linear_end, xi - tail_start)`.
    pub delta: f64,
    pub linear_end: f64,
    pub tail_start: f64,
    /// Quintic coefficients in `t = (u - linear_end) / (tail_start - linear_end)`.
    middle: [f64; 6],
    tail: ConvexTail,
}

/// Margins of the defining inequalities of `H` on a dense grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HReport {
    /// `min (H(u) - u)` over `(0, Xi)`.
    pub lower_margin: f64,
    /// `min (F(u) - H(u))` over `(0, Xi)`.
    pub upper_margin: f64,
    pub min_slope: f64,
    /// `min H''` over `[Xi - delta, Xi]`.
    pub min_tail_curvature: f64,
    pub endpoint_error: f64,
    pub grid_size: usize,
    pub passed: bool,
}

impl HFunction {
    /// `[H(u), H'(u), H''(u)]` for `u` clamped into `[0, Xi]`.
    pub fn jet(&self, u: f64) -> [f64; 3] {
        let u = u.clamp(0.0, self.xi);
        if u <= self.linear_end {
            [self.f_slope * u, self.f_slope, 0.0]
        } else if u < self.tail_start {
            let len = self.tail_start - self.linear_end;
            let t = (u - self.linear_end) / len;
            let c = &self.middle;
            let p = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
            let p1 = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
            let p2 = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
            [p, p1 / len, p2 / (len * len)]
        } else {
            let [h, h1, h2] = self.tail.jet(self.xi - u);
            [u + h, 1.0 - h1, h2]
        }
    }

    #[inline]
    pub fn value(&self, u: f64) -> f64 {
        self.jet(u)[0]
    }

    pub fn validate(&self, g: &Nonlinearity) -> HReport {
        let mut lower = f64::INFINITY;
        let mut upper = f64::INFINITY;
        let mut slope = f64::INFINITY;
        let mut curvature = f64::INFINITY;
        let grid = offset_grid(0.0, self.xi, H_CHECK_POINTS);
        for &u in &grid {
            let [h, h1, h2] = self.jet(u);
            lower = lower.min(h - u);
            upper = upper.min(g.f(u) - h);
            slope = slope.min(h1);
            if u >= self.xi - self.delta {
                curvature = curvature.min(h2);
            }
        }
        for u in [0.0, self.xi] {
            slope = slope.min(self.jet(u)[1]);
        }
        curvature = curvature.min(self.jet(self.xi)[2]);
        let endpoint_error = self.value(0.0).abs().max((self.value(self.xi) - self.xi).abs());
        HReport {
            lower_margin: lower,
            upper_margin: upper,
            min_slope: slope,
            min_tail_curvature: curvature,
            endpoint_error,
            grid_size: grid.len(),
            passed: lower > 0.0
                && upper >= -CLOSED_FORM_TOL
                && slope > 0.0
                && curvature >= -1e-10
                && endpoint_error <= 1e-10,
        }
    }
}

/// Quintic `p` on `[0, 1]` with `p, p', p''` prescribed at both ends, where
/// derivatives are taken in `t` (already multiplied by powers of the length).
fn hermite_quintic(y0: [f64; 3], y1: [f64; 3]) -> [f64; 6] {
    let (c0, c1, c2) = (y0[0], y0[1], 0.5 * y0[2]);
    let a = y1[0] - (c0 + c1 + c2);
    let b = y1[1] - (c1 + 2.0 * c2);
    let c = y1[2] - 2.0 * c2;
    [
        c0,
        c1,
        c2,
        10.0 * a - 4.0 * b + 0.5 * c,
        -15.0 * a + 7.0 * b - c,
        6.0 * a - 3.0 * b + 0.5 * c,
    ]
}

/// Convex tail `h` on `[0, Xi/2]` with `0 < h(s) < F(Xi - s) - (Xi - s)`.
fn convex_tail(g: &Nonlinearity, xi: f64) -> Result<ConvexTail> {
    let ds = 0.5 * xi / TAIL_CELLS as f64;
    let gap = |s: f64| g.f(xi - s) - (xi - s);
    let ratio = (1..=TAIL_CELLS)
        .map(|j| {
            let s = j as f64 * ds;
            gap(s) / s
        })
        .fold(f64::INFINITY, f64::min);
    if !(ratio > 0.0) {
        return Err(Error::Construction(format!(
            "F(u) <= u somewhere on [Xi/2, Xi) (min ratio {ratio:.3e})"
        )));
    }
    let slope = 0.5 * ratio;
    let mut k: Vec<f64> = (0..=TAIL_CELLS)
        .map(|j| {
            let s = j as f64 * ds;
            gap(s) - slope * s
        })
        .collect();
    k[0] = 0.0;
    for j in (0..TAIL_CELLS).rev() {
        k[j] = k[j].min(k[j + 1]).max(0.0);
    }
    let mut d1 = vec![0.0; TAIL_CELLS + 1];
    let mut d0 = vec![0.0; TAIL_CELLS + 1];
    for j in 0..TAIL_CELLS {
        d1[j + 1] = d1[j] + 0.5 * ds * (k[j] + k[j + 1]);
        d0[j + 1] = d0[j] + d1[j] * ds + k[j] * ds * ds / 2.0 + (k[j + 1] - k[j]) * ds * ds / 6.0;
    }
    Ok(ConvexTail { slope, ds, k, d1, d0 })
}

/// Builds `H` with `H(u) = f u` near `0`, a convex tail near `Xi` obtained by
/// integrating a running minimum twice, and a `C^2` quintic in between.
/// Knot placements are tried in a fixed order until the result validates.
pub fn build_h(g: &Nonlinearity, xi: f64, f: f64) -> Result<HFunction> {
    if !(g.fprime0 > 1.0) {
        return Err(Error::Precondition(format!("F'(0) = {} is not above 1", g.fprime0)));
    }
    if !(xi > 0.0 && xi <= 1.0) {
        return Err(Error::Precondition(format!("Xi must lie in (0, 1], got {xi}")));
    }
    if !(f > 1.0 && f < g.fprime0) {
        return Err(Error::Precondition(format!(
            "slope {f} outside (1, F'(0)) = (1, {})",
            g.fprime0
        )));
    }
    // Largest scan point below which f u < F(u) holds throughout.
    let h = 0.5 * xi / SCAN_POINTS as f64;
    let first_bad = (1..=SCAN_POINTS).find(|&i| {
        let u = i as f64 * h;
        f * u >= g.f(u)
    });
    let delta2 = match first_bad {
        Some(1) => {
            return Err(Error::Construction(format!(
                "no linear segment: f u >= F(u) already at u = {h:.3e}; f = {f} is too close to F'(0) = {} for the scan resolution",
                g.fprime0
            )))
        }
        Some(i) => (i - 1) as f64 * h,
        None => 0.5 * xi,
    };
    let delta3 = delta2 / f;
    let tail = convex_tail(g, xi)?;

    let mut tried = Vec::new();
    for a in [delta3, 0.5 * delta3, 0.25 * delta3, 0.125 * delta3] {
        for d1 in [0.25, 0.125, 0.375, 0.0625].map(|s| s * xi) {
            let b = xi - d1;
            let len = b - a;
            let [hb, hb1, hb2] = {
                let [t0, t1, t2] = tail.jet(d1);
                [b + t0, 1.0 - t1, t2]
            };
            let middle = hermite_quintic(
                [f * a, f * len, 0.0],
                [hb, hb1 * len, hb2 * len * len],
            );
            let cand = HFunction {
                f_slope: f,
                xi,
                delta: a.min(d1),
                linear_end: a,
                tail_start: b,
                middle,
                tail: tail.clone(),
            };
            let report = cand.validate(g);
            if report.passed {
                return Ok(cand);
            }
            tried.push(format!(
                "(a = {a:.4}, tail = {d1:.4}: lower {:.2e}, upper {:.2e}, slope {:.2e})",
                report.lower_margin, report.upper_margin, report.min_slope
            ));
        }
    }
    Err(Error::Construction(format!(
        "no knot placement produced a valid H; tried {}",
        tried.join(", ")
    )))
}

// ---------------------------------------------------------------------------
// Piecewise functions

/// A closed-form `C^2` piece.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Piece {
    Linear { slope: f64, intercept: f64 },
    /// `coef x^exponent + offset`.
    Power { coef: f64, exponent: f64, offset: f64 },
}

impl Piece {
    pub fn jet(&self, x: f64) -> [f64; 3] {
        match *self {
            Piece::Linear { slope, intercept } => [slope * x + intercept, slope, 0.0],
            Piece::Power {
                coef,
                exponent,
                offset,
            } => {
                let p = x.powf(exponent - 2.0);
                [
                    coef * p * x * x + offset,
                    coef * exponent * p * x,
                    coef * exponent * (exponent - 1.0) * p,
                ]
            }
        }
    }

    /// The piece `x -> out * self(arg * x)`.
    pub fn rescaled(&self, arg: f64, out: f64) -> Piece {
        match *self {
            Piece::Linear { slope, intercept } => Piece::Linear {
                slope: out * slope * arg,
                intercept: out * intercept,
            },
            Piece::Power {
                coef,
                exponent,
                offset,
            } => Piece::Power {
                coef: out * coef * arg.powf(exponent),
                exponent,
                offset: out * offset,
            },
        }
    }
}

/// Extension past the closed-form region by `w(x) = H(w(contraction x))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recursion {
    pub contraction: f64,
    pub h: HFunction,
}

/// Closed-form pieces on `[breakpoints[i], breakpoints[i+1]]`, optionally
/// continued to `[0, x_max]` by a recursion. Evaluation is right-continuous.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseFn {
    pub breakpoints: Vec<f64>,
    pub pieces: Vec<Piece>,
    pub recursion: Option<Recursion>,
    pub x_max: f64,
}

/// Continuity and derivative-jump orientation at every breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub max_gap: f64,
    /// `min (f'(x+) - f'(x-))` over the breakpoints.
    pub min_jump: f64,
    pub worst_x: f64,
    pub passed: bool,
}

impl PiecewiseFn {
    fn closed_end(&self) -> f64 {
        *self.breakpoints.last().expect("at least one piece")
    }

    fn closed_jet(&self, x: f64) -> [f64; 3] {
        let i = self.breakpoints.partition_point(|&b| b <= x);
        self.pieces[i.saturating_sub(1).min(self.pieces.len() - 1)].jet(x)
    }

    /// `[f(x), f'(x), f''(x)]`; derivatives through the recursion by the chain rule.
    pub fn jet(&self, x: f64) -> [f64; 3] {
        let end = self.closed_end();
        let Some(rec) = self.recursion.as_ref().filter(|_| x > end) else {
            return self.closed_jet(x);
        };
        let b = rec.contraction;
        let mut y = x;
        let mut depth = 0;
        while y > end {
            y *= b;
            depth += 1;
        }
        let mut j = self.closed_jet(y);
        for _ in 0..depth {
            let [h0, h1, h2] = rec.h.jet(j[0]);
            j = [h0, b * h1 * j[1], b * b * (h2 * j[1] * j[1] + h1 * j[2])];
        }
        j
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        self.jet(x)[0]
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        self.jet(x)[1]
    }

    /// A copy with piece `index` multiplied by `factor`.
    pub fn with_piece_scaled(&self, index: usize, factor: f64) -> Self {
        let mut out = self.clone();
        out.pieces[index] = out.pieces[index].rescaled(1.0, factor);
        out
    }

    pub fn check_structure(&self) -> StructureReport {
        let mut max_gap = 0.0f64;
        let mut min_jump = f64::INFINITY;
        let mut worst_x = f64::NAN;
        let mut visit = |x: f64, left: [f64; 3], right: [f64; 3]| {
            let gap = (left[0] - right[0]).abs() / left[0].abs().max(1.0);
            max_gap = max_gap.max(gap);
            let jump = right[1] - left[1];
            if jump < min_jump {
                min_jump = jump;
                worst_x = x;
            }
        };
        for i in 1..self.pieces.len() {
            let x = self.breakpoints[i];
            visit(x, self.pieces[i - 1].jet(x), self.pieces[i].jet(x));
        }
        if let Some(rec) = &self.recursion {
            let x = self.closed_end();
            // Nudged so that rounding of `x B` cannot select the piece to the left.
            let inner = self.closed_jet(x * rec.contraction * (1.0 + 1e-14));
            let [h0, h1, _] = rec.h.jet(inner[0]);
            let right = [h0, rec.contraction * h1 * inner[1], 0.0];
            visit(x, self.pieces[self.pieces.len() - 1].jet(x), right);
        }
        StructureReport {
            max_gap,
            min_jump,
            worst_x,
            passed: max_gap <= CONTINUITY_TOL && !(min_jump < -JUMP_TOL),
        }
    }
}

/// Writes `x,w(x),w'(x)` rows.
pub fn write_piecewise_csv(path: &Path, func: &PiecewiseFn, xs: &[f64]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "x,w(x),w'(x)")?;
    for &x in xs {
        let [v, d, _] = func.jet(x);
        writeln!(out, "{x},{v},{d}")?;
    }
    out.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Base functions v_omega

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescentStep {
    pub omega: f64,
    /// Slope `m` of the power extension past `1`.
    pub m: f64,
    /// Rescaling factor `M >= 1/B`.
    pub scale: f64,
    pub m_omega: f64,
    pub report: CertificateReport,
}

/// `v_omega` on `[0, 1]` with `v = (m_omega/omega)(x^omega - 1) + 1` on `[B, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VOmega {
    pub func: PiecewiseFn,
    pub omega: f64,
    pub m_omega: f64,
    pub kappa: f64,
    pub kappa_at: f64,
    pub steps: Vec<DescentStep>,
    pub report: CertificateReport,
}

/// `inf_{omega in (0,1]} (f B^omega - 1 + nu omega)` with its minimizer.
pub fn kappa(b: f64, f: f64, nu_over_zeta: f64) -> (f64, f64) {
    let ln_b = b.ln();
    let e = grid_sup(
        |w| -(f * (w * ln_b).exp() - 1.0 + nu_over_zeta * w),
        0.0,
        1.0,
        SCAN_POINTS,
    );
    (-e.value, e.argmax)
}

/// Residual `f v(Bx) - v(x) + nu x v'(x)` on uniform and geometric offset grids.
fn v_omega_residual(func: &PiecewiseFn, b: f64, f: f64, nu: f64, n: usize) -> CertificateReport {
    let lo = (func.breakpoints.get(1).copied().unwrap_or(1.0) * 1e-2).max(1e-300);
    let mut xs = offset_grid(0.0, 1.0, n);
    xs.extend(log_offset_grid(lo, 1.0, n / 4));
    let report = CertificateReport::from_residuals(xs.into_iter().map(|x| {
        let [v, d, _] = func.jet(x);
        (x, f * func.value(b * x) - v + nu * x * d)
    }));
    CertificateReport {
        passed: report.min_residual >= -CLOSED_FORM_TOL,
        ..report
    }
}

/// Runs the descent `omega -> max(alpha^2 omega, target)` from `v_1(x) = x`,
/// verifying `0 <= f v(Bx) - v(x) + nu x v'(x)` on a dense grid after each step.
pub fn build_v_omega(
    b: f64,
    f: f64,
    nu_over_zeta: f64,
    alpha: f64,
    omega_target: f64,
) -> Result<VOmega> {
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::Domain {
            value: b,
            domain: "(0, 1)",
        });
    }
    if !(f > 1.0) || !(nu_over_zeta >= 0.0) {
        return Err(Error::Precondition(format!(
            "need f > 1 and nu/zeta >= 0, got f = {f}, nu/zeta = {nu_over_zeta}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain {
            value: alpha,
            domain: "(0, 1)",
        });
    }
    if !(omega_target > 0.0 && omega_target <= 1.0) {
        return Err(Error::Domain {
            value: omega_target,
            domain: "(0, 1]",
        });
    }
    let (kappa, kappa_at) = kappa(b, f, nu_over_zeta);
    if !(kappa > 0.0) {
        return Err(Error::Precondition(format!(
            "kappa = {kappa:.6} <= 0 (attained at omega = {kappa_at:.4})"
        )));
    }
    let alpha_min = (1.0 - kappa / (f - 1.0)).max(0.0).cbrt();
    if !(alpha > alpha_min) {
        return Err(Error::Precondition(format!(
            "alpha = {alpha} must exceed (1 - kappa/(f-1))_+^(1/3) = {alpha_min:.6}"
        )));
    }

    let n = SCAN_POINTS;
    let mut func = PiecewiseFn {
        breakpoints: vec![0.0, 1.0],
        pieces: vec![Piece::Linear {
            slope: 1.0,
            intercept: 0.0,
        }],
        recursion: None,
        x_max: 1.0,
    };
    let mut omega = 1.0f64;
    let mut m_omega = 1.0f64;
    let mut report = v_omega_residual(&func, b, f, nu_over_zeta, n);
    let mut steps = Vec::new();
    let fail = |omega: f64, r: &CertificateReport| {
        Error::Construction(format!(
            "v_omega inequality fails at x = {:.6e} (residual {:.3e}, omega = {omega:.4})",
            r.argmin_x, r.min_residual
        ))
    };
    if !report.passed {
        return Err(fail(omega, &report));
    }

    while omega > omega_target {
        let w2 = (alpha * alpha * omega).max(omega_target);
        let m = 0.5 * (m_omega + w2 / alpha.powi(3));
        let power_above = |x: f64| m / w2 * (x.powf(w2) - 1.0) + 1.0;
        // The extension lies below the current v on [B, 1].
        let worst = offset_grid(b, 1.0, 1000)
            .into_iter()
            .map(|x| func.value(x) - power_above(x))
            .fold(f64::INFINITY, f64::min);
        if worst < -CLOSED_FORM_TOL {
            return Err(Error::Construction(format!(
                "power extension exceeds v on [B, 1] by {:.3e} at omega = {w2:.4}",
                -worst
            )));
        }
        let slope_at = |scale: f64| {
            let p = scale.powf(w2);
            w2 * p / (p - 1.0 + w2 / m)
        };
        let mut scale = 1.0 / b;
        while !(slope_at(scale) < w2 / alpha) {
            scale *= 2.0;
            if !scale.is_finite() {
                return Err(Error::Construction(format!(
                    "no rescaling brings m_omega below omega/alpha at omega = {w2:.4}"
                )));
            }
        }
        let norm = 1.0 / power_above(scale);
        let mut breakpoints: Vec<f64> = func.breakpoints.iter().map(|&x| x / scale).collect();
        breakpoints.push(1.0);
        let mut pieces: Vec<Piece> = func.pieces.iter().map(|p| p.rescaled(scale, norm)).collect();
        pieces.push(Piece::Power {
            coef: norm * m / w2 * scale.powf(w2),
            exponent: w2,
            offset: norm * (1.0 - m / w2),
        });
        func = PiecewiseFn {
            breakpoints,
            pieces,
            recursion: None,
            x_max: 1.0,
        };
        omega = w2;
        m_omega = slope_at(scale);
        report = v_omega_residual(&func, b, f, nu_over_zeta, n);
        steps.push(DescentStep {
            omega,
            m,
            scale,
            m_omega,
            report,
        });
        if !report.passed {
            return Err(fail(omega, &report));
        }
        let structure = func.check_structure();
        if !structure.passed {
            return Err(Error::Construction(format!(
                "v_omega breakpoint defect at x = {:.4e} (gap {:.2e}, jump {:.2e})",
                structure.worst_x, structure.max_gap, structure.min_jump
            )));
        }
    }
    Ok(VOmega {
        func,
        omega,
        m_omega,
        kappa,
        kappa_at,
        steps,
        report,
    })
}

// ---------------------------------------------------------------------------
// The scaffold w

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaffold {
    pub func: PiecewiseFn,
    /// `-ln f / ln B`.
    pub omega0: f64,
    pub delta: f64,
    pub structure: StructureReport,
    /// `w(x_max)`.
    pub far_value: f64,
    /// `w(B^-k)` for `k = 0, 1, ...` up to `x_max`.
    pub far_sequence: Vec<f64>,
}

/// `w = B^omega0 delta v_omega` on `[0, 1]`, `B^omega0 delta x^omega0` on
/// `[1, 1/B]`, and `w(x) = H(w(Bx))` beyond.
pub fn build_w(h: &HFunction, b: f64, v: &VOmega, delta: f64, x_max: f64) -> Result<Scaffold> {
    if !(b > 0.0 && b < 1.0) {
        return Err(Error::Domain {
            value: b,
            domain: "(0, 1)",
        });
    }
    let omega0 = -h.f_slope.ln() / b.ln();
    if !(v.omega < omega0 && v.m_omega < omega0) {
        return Err(Error::Construction(format!(
            "need omega < omega0 and m_omega < omega0, got omega = {}, m_omega = {}, omega0 = {omega0}",
            v.omega, v.m_omega
        )));
    }
    if !(delta > 0.0 && delta <= h.linear_end) {
        return Err(Error::Construction(format!(
            "delta = {delta} must lie in (0, {}] where H is linear",
            h.linear_end
        )));
    }
    if !(x_max > 1.0 / b) {
        return Err(Error::Precondition(format!("x_max = {x_max} must exceed 1/B")));
    }
    let c = b.powf(omega0) * delta;
    let mut breakpoints = v.func.breakpoints.clone();
    breakpoints.push(1.0 / b);
    let mut pieces: Vec<Piece> = v.func.pieces.iter().map(|p| p.rescaled(1.0, c)).collect();
    pieces.push(Piece::Power {
        coef: c,
        exponent: omega0,
        offset: 0.0,
    });
    let func = PiecewiseFn {
        breakpoints,
        pieces,
        recursion: Some(Recursion {
            contraction: b,
            h: h.clone(),
        }),
        x_max,
    };

    let structure = func.check_structure();
    if !structure.passed {
        return Err(Error::Construction(format!(
            "w breakpoint defect at x = {:.4e} (gap {:.2e}, jump {:.2e})",
            structure.worst_x, structure.max_gap, structure.min_jump
        )));
    }
    let lo = func.breakpoints.get(1).copied().unwrap_or(1.0) * 1e-2;
    let mut prev = 0.0;
    for x in log_offset_grid(lo, x_max, 4 * SCAN_POINTS) {
        let [w, d, _] = func.jet(x);
        if !(w > prev && d > 0.0) {
            return Err(Error::Construction(format!(
                "w is not increasing at x = {x:.6e} (w = {w:.6e}, w' = {d:.3e})"
            )));
        }
        prev = w;
    }
    let mut far_sequence = Vec::new();
    let mut x = 1.0;
    while x <= x_max {
        far_sequence.push(func.value(x));
        x /= b;
    }
    if far_sequence.windows(2).any(|p| p[1] < p[0]) {
        return Err(Error::Construction("w(B^-k) is not monotone".into()));
    }
    Ok(Scaffold {
        far_value: func.value(x_max),
        func,
        omega0,
        delta,
        structure,
        far_sequence,
    })
}

// ---------------------------------------------------------------------------
// Subsolution inequality

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsolutionReport {
    /// `zeta [F(w(x/gamma)) - w(x)] + nu x w'(x)` over the whole grid.
    pub first_order: CertificateReport,
    /// The same plus `w''/2`, over grid points `x >= m_report`.
    pub second_order: Option<CertificateReport>,
    pub m_report: Option<f64>,
    pub passed: bool,
}

fn first_order_residual(w: &PiecewiseFn, g: &Nonlinearity, zeta: f64, gamma: f64, nu: f64, x: f64) -> [f64; 2] {
    let [v, d, d2] = w.jet(x);
    let r = zeta * (g.f(w.value(x / gamma)) - v) + nu * x * d;
    [r, r + 0.5 * d2]
}

/// Grid minima of the first-order and (for `x >= m_report`) second-order
/// subsolution residuals. Never fails; violations are located in the report.
pub fn check_subsolution_inequality(
    w: &PiecewiseFn,
    g: &Nonlinearity,
    zeta: f64,
    gamma: f64,
    nu: f64,
    x_grid: &[f64],
    m_report: Option<f64>,
) -> SubsolutionReport {
    let residuals: Vec<(f64, [f64; 2])> = x_grid
        .iter()
        .map(|&x| (x, first_order_residual(w, g, zeta, gamma, nu, x)))
        .collect();
    let first_order = CertificateReport::from_residuals(residuals.iter().map(|&(x, r)| (x, r[0])));
    let second_order = m_report.map(|m| {
        CertificateReport::from_residuals(
            residuals
                .iter()
                .filter(|(x, _)| *x >= m)
                .map(|&(x, r)| (x, r[1])),
        )
    });
    let passed = first_order.passed && second_order.map_or(true, |r| r.passed);
    SubsolutionReport {
        first_order,
        second_order,
        m_report,
        passed,
    }
}

/// Smallest grid point beyond which the second-order residual stays above
/// `-CERT_TOL` on the rest of the (sorted) grid.
pub fn second_order_onset(
    w: &PiecewiseFn,
    g: &Nonlinearity,
    zeta: f64,
    gamma: f64,
    nu: f64,
    x_grid: &[f64],
) -> Option<f64> {
    let mut onset = None;
    for &x in x_grid.iter().rev() {
        if first_order_residual(w, g, zeta, gamma, nu, x)[1] < -CERT_TOL {
            break;
        }
        onset = Some(x);
    }
    onset
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nonlinearity::VotingRule;

    fn maj3() -> Nonlinearity {
        Nonlinearity::new(VotingRule::majority_fixed(3).unwrap())
    }

    #[test]
    fn report_minimum_and_nan() {
        let r = CertificateReport::from_residuals([(1.0, 0.5), (2.0, -1e-9), (3.0, 0.2)]);
        assert_eq!(r.argmin_x, 2.0);
        assert!(r.passed);
        let r = CertificateReport::from_residuals([(1.0, 0.5), (2.0, f64::NAN)]);
        assert!(!r.passed);
        assert_eq!(r.argmin_x, 2.0);
    }

    #[test]
    fn supersolution_equality_case() {
        let g = maj3();
        let xs = offset_grid(0.0, 20.0, 2000);
        let delta: f64 = 1.0 * (1.0 - 1.5 / 2.0);
        assert!((delta - 0.25).abs() < 1e-15);
        let r = check_supersolution(delta, 1.0, 1.0, &g, 1.0, 2.0, &xs).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.linear_bound.min_residual >= -1e-10);
        let r = check_supersolution(0.30, 1.0, 1.0, &g, 1.0, 2.0, &xs).unwrap();
        assert!(!r.passed);
        assert!(r.linear_bound.min_residual < 0.0);
        // the violation on the linear bound is -0.05 x, largest at the right end
        assert!(r.linear_bound.argmin_x > 19.0);
    }

    #[test]
    fn supersolution_rejects_bad_omega() {
        let g = maj3();
        assert!(matches!(
            check_supersolution(0.0, 1.0, 1.5, &g, 1.0, 2.0, &[1.0]),
            Err(Error::Domain { .. })
        ));
        assert!(check_supersolution(0.0, 1.0, 0.5, &g, 1.0, 2.0, &[0.0]).is_err());
    }

    #[test]
    fn quintic_matches_end_data() {
        let c = hermite_quintic([0.1, 0.4, -0.3], [0.9, 0.2, 0.7]);
        let p = |t: f64| c.iter().rev().fold(0.0, |a, &ci| a * t + ci);
        let p1 = |t: f64| c[1] + 2.0 * c[2] * t + 3.0 * c[3] * t * t + 4.0 * c[4] * t.powi(3) + 5.0 * c[5] * t.powi(4);
        let p2 = |t: f64| 2.0 * c[2] + 6.0 * c[3] * t + 12.0 * c[4] * t * t + 20.0 * c[5] * t.powi(3);
        assert!((p(0.0) - 0.1).abs() < 1e-14 && (p(1.0) - 0.9).abs() < 1e-14);
        assert!((p1(0.0) - 0.4).abs() < 1e-14 && (p1(1.0) - 0.2).abs() < 1e-13);
        assert!((p2(0.0) + 0.3).abs() < 1e-14 && (p2(1.0) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn h_for_majority() {
        let g = maj3();
        let h = build_h(&g, 1.0, 1.4).unwrap();
        let r = h.validate(&g);
        assert!(r.passed, "{r:?}");
        assert!(h.delta > 0.0 && h.delta < 0.5);
        assert_eq!(h.value(0.0), 0.0);
        assert!((h.value(1.0) - 1.0).abs() <= 1e-10);
        assert!((h.value(h.delta / 2.0) - 0.7 * h.delta).abs() < 1e-15);
        // C^2 joins
        for u in [h.linear_end, h.tail_start] {
            let l = h.jet(u - 1e-9);
            let rr = h.jet(u + 1e-9);
            assert!((l[0] - rr[0]).abs() < 1e-8);
            assert!((l[1] - rr[1]).abs() < 1e-6);
            assert!((l[2] - rr[2]).abs() < 1e-4);
        }
    }

    #[test]
    fn h_derivatives_match_differences() {
        let g = maj3();
        let h = build_h(&g, 1.0, 1.4).unwrap();
        let e = 1e-5;
        for u in offset_grid(0.01, 0.99, 97) {
            let [_, d1, d2] = h.jet(u);
            let fd1 = (h.value(u + e) - h.value(u - e)) / (2.0 * e);
            let fd2 = (h.jet(u + e)[1] - h.jet(u - e)[1]) / (2.0 * e);
            assert!((d1 - fd1).abs() < 1e-7, "u = {u}");
            assert!((d2 - fd2).abs() < 1e-5, "u = {u}");
        }
    }

    #[test]
    fn h_rejects_bad_slope() {
        let g = maj3();
        assert!(build_h(&g, 1.0, 1.6).is_err());
        assert!(build_h(&g, 1.0, 1.0).is_err());
        // F'(0) - f below the scan resolution
        assert!(matches!(build_h(&g, 1.0, 1.5 - 1e-12), Err(Error::Construction(_))));
    }

    #[test]
    fn kappa_example() {
        let (k, at) = kappa(0.5, 2.0, 0.5);
        assert!((k - 0.5).abs() < 1e-12);
        assert_eq!(at, 1.0);
    }

    #[test]
    fn v_one_is_identity() {
        let v = build_v_omega(0.82, 1.4, 0.0, 0.9, 1.0).unwrap();
        assert_eq!(v.m_omega, 1.0);
        assert_eq!(v.func.pieces.len(), 1);
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(v.func.value(x), x);
        }
    }

    #[test]
    fn v_omega_ladder() {
        let v = build_v_omega(0.5, 2.0, 0.5, 0.85, 0.05).unwrap();
        assert!(v.omega <= 0.05);
        assert!((v.kappa - 0.5).abs() < 1e-12);
        for s in &v.steps {
            assert!(s.report.passed);
            assert!(s.m_omega > s.omega && s.m_omega < s.omega / 0.85);
        }
        let f = &v.func;
        assert_eq!(f.value(0.0), 0.0);
        assert!((f.value(1.0) - 1.0).abs() < 1e-12);
        assert!(matches!(f.pieces[0], Piece::Linear { .. }));
        // closed form on [B, 1]
        for x in offset_grid(0.5, 1.0, 50) {
            let expect = v.m_omega / v.omega * (x.powf(v.omega) - 1.0) + 1.0;
            assert!((f.value(x) - expect).abs() < 1e-12);
        }
        let mut prev = -1.0;
        for x in log_offset_grid(1e-30, 1.0, 5000) {
            let y = f.value(x);
            assert!(y > prev);
            prev = y;
        }
        assert!(f.check_structure().passed);
    }

    #[test]
    fn v_omega_preconditions() {
        // f B - 1 + nu < 0 at omega = 1
        assert!(matches!(
            build_v_omega(0.5, 1.5, 0.0, 0.9, 0.5),
            Err(Error::Precondition(_))
        ));
        // alpha below (1 - kappa/(f-1))^(1/3)
        assert!(matches!(
            build_v_omega(0.82, 1.4, 0.0, 0.5, 0.5),
            Err(Error::Precondition(_))
        ));
    }

    fn chain() -> (Nonlinearity, Scaffold) {
        let g = maj3();
        let h = build_h(&g, 1.0, 1.4).unwrap();
        let v = build_v_omega(0.82, 1.4, 0.0, 0.9, 1.0).unwrap();
        let delta = h.delta;
        let w = build_w(&h, 0.82, &v, delta, 0.82f64.powi(-40)).unwrap();
        (g, w)
    }

    #[test]
    fn w_seed_and_recursion() {
        let (_, s) = chain();
        let b: f64 = 0.82;
        let c = b.powf(s.omega0) * s.delta;
        for x in offset_grid(1.0, b.powi(-2), 200) {
            let [w, d, d2] = s.func.jet(x);
            assert!((w - c * x.powf(s.omega0)).abs() < 1e-14, "x = {x}");
            assert!((d - c * s.omega0 * x.powf(s.omega0 - 1.0)).abs() < 1e-13);
            assert!((d2 - c * s.omega0 * (s.omega0 - 1.0) * x.powf(s.omega0 - 2.0)).abs() < 1e-12);
        }
        for x in offset_grid(0.0, 1.0 / b, 200) {
            assert!(s.func.value(b * x) <= s.delta);
        }
        assert!((s.far_value - 1.0).abs() < 0.01, "{}", s.far_value);
    }

    #[test]
    fn w_derivatives_through_recursion() {
        let (_, s) = chain();
        let e = 1e-6;
        for x in log_offset_grid(2.0, 500.0, 60) {
            let [_, d1, d2] = s.func.jet(x);
            let fd1 = (s.func.value(x + e) - s.func.value(x - e)) / (2.0 * e);
            let fd2 = (s.func.derivative(x + e) - s.func.derivative(x - e)) / (2.0 * e);
            assert!((d1 - fd1).abs() < 1e-7 * (1.0 + d1.abs()), "x = {x}");
            assert!((d2 - fd2).abs() < 1e-5, "x = {x}");
        }
    }

    #[test]
    fn subsolution_and_perturbation() {
        let (g, s) = chain();
        let xs = log_offset_grid(1e-3, s.func.x_max, 4000);
        let r = check_subsolution_inequality(&s.func, &g, 1.0, 1.2, 0.0, &xs, None);
        assert!(r.passed, "{r:?}");
        let bad = s.func.with_piece_scaled(0, 0.5);
        let r = check_subsolution_inequality(&bad, &g, 1.0, 1.2, 0.0, &xs, None);
        assert!(!r.passed);
        assert!(r.first_order.argmin_x >= 1.0 && r.first_order.argmin_x < 1.2);
    }

    #[test]
    fn large_gamma_is_reported_not_fatal() {
        let (g, s) = chain();
        let xs = offset_grid(0.0, 50.0, 500);
        let r = check_subsolution_inequality(&s.func, &g, 1.0, 40.0, 0.0, &xs, Some(10.0));
        assert!(!r.passed);
        assert!(r.first_order.argmin_x.is_finite());
    }

    #[test]
    fn build_w_rejects_steep_base() {
        let g = maj3();
        let h = build_h(&g, 1.0, 1.4).unwrap();
        let mut v = build_v_omega(0.82, 1.4, 0.0, 0.9, 1.0).unwrap();
        v.m_omega = 2.0;
        assert!(matches!(build_w(&h, 0.82, &v, h.delta, 100.0), Err(Error::Construction(_))));
    }

    #[test]
    fn csv_and_json() {
        let (_, s) = chain();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.csv");
        write_piecewise_csv(&p, &s.func, &[0.5, 2.0, 30.0]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("x,w(x),w'(x)\n"));
        assert_eq!(text.lines().count(), 4);
        let json = serde_json::to_string(&s).unwrap();
        let back: Scaffold = serde_json::from_str(&json).unwrap();
        assert_eq!(back.func.value(30.0), s.func.value(30.0));
    }
}
