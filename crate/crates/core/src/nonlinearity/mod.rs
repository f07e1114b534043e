//! The one-layer vote transfer map `F`, its derivative, and the constants
//! derived from it: `F'(0)`, the first positive fixed point, the supremum of
//! `F(v)/v`, the KPP flag, and the spreading speeds.

mod binomial;
mod rule;

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use self::binomial::{binomial, binomial_expectation, binomial_pmf_into};
pub use self::rule::VotingRule;
use crate::error::{Error, Result};
use crate::numeric::{bisect_predicate, grid_sup, Extremum};

/// Grid resolution for every scan over `(0, 1]`.
pub const SCAN_POINTS: usize = 10_000;
/// Absolute slack in the KPP comparison `F(v) <= F'(0) v`.
pub const KPP_TOL: f64 = 1e-10;
const DOMAIN_SLACK: f64 = 1e-12;
const FIXED_POINT_TOL: f64 = 1e-12;

/// `F(u) = 2 sum_n p_n sum_k eta(n,k) P_{(1+u)/2}(Bin(n) >= k) - 1`.
///
/// Evaluated in Bernstein form: the tail sums are folded into the cumulative
/// threshold law, so each arity costs one binomial pmf.
pub fn eval_f(rule: &VotingRule, u: f64) -> Result<f64> {
    check_domain(u)?;
    Ok(f_unchecked(rule, u.clamp(-1.0, 1.0)))
}

/// `F'(u) = sum_n p_n n sum_k eta(n,k) P_{(1+u)/2}(Bin(n-1) = k-1)`, which is the
/// binomial-CDF derivative identity rewritten with `(n-k+1) C(n,k-1) = n C(n-1,k-1)`.
pub fn eval_f_prime(rule: &VotingRule, u: f64) -> Result<f64> {
    check_domain(u)?;
    Ok(f_prime_unchecked(rule, u.clamp(-1.0, 1.0)))
}

fn check_domain(u: f64) -> Result<()> {
    if u.is_nan() || u.abs() > 1.0 + DOMAIN_SLACK {
        return Err(Error::Domain {
            value: u,
            domain: "[-1, 1]",
        });
    }
    Ok(())
}

fn f_unchecked(rule: &VotingRule, u: f64) -> f64 {
    let q = 0.5 * (1.0 + u);
    let mut acc = 0.0;
    for (n, p) in rule.support() {
        let cdf = rule.threshold_cdf(n);
        // P(at least k of n) summed against eta equals E[P(threshold <= j)], j ~ Bin(n, q).
        acc += p * binomial_expectation(n, q, |j| cdf[j]);
    }
    2.0 * acc - 1.0
}

fn f_prime_unchecked(rule: &VotingRule, u: f64) -> f64 {
    let q = 0.5 * (1.0 + u);
    let mut acc = 0.0;
    for (n, p) in rule.support() {
        acc += p * n as f64 * binomial_expectation(n - 1, q, |j| rule.eta(n, j + 1));
    }
    acc
}

/// `F'(0)` for the majority rule: `sum_n p_n 2^(1-n) ceil(n/2) C(n, floor(n/2))`.
pub fn fprime0_majority_closed_form(pmf: &BTreeMap<usize, f64>) -> Result<f64> {
    // Validation only.
    VotingRule::majority(pmf)?;
    Ok(pmf
        .iter()
        .map(|(&n, &p)| p * majority_term(n))
        .sum())
}

fn majority_term(n: usize) -> f64 {
    if n <= binomial::EXACT_LIMIT {
        2f64.powi(1 - n as i32) * n.div_ceil(2) as f64 * binomial(n, n / 2)
    } else {
        ((1.0 - n as f64) * std::f64::consts::LN_2
            + (n.div_ceil(2) as f64).ln()
            + binomial::ln_binomial(n, n / 2))
        .exp()
    }
}

/// The majority `F'(0)` term for arity `n` divided by its large-`n` asymptote `sqrt(2n/pi)`.
pub fn stirling_ratio(n: usize) -> Result<f64> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::Domain {
            value: n as f64,
            domain: "even integers n >= 2",
        });
    }
    let ln_term = (1.0 - n as f64) * std::f64::consts::LN_2
        + ((n / 2) as f64).ln()
        + binomial::ln_binomial(n, n / 2);
    Ok((ln_term - 0.5 * (2.0 * n as f64 / PI).ln()).exp())
}

/// Result of the fixed-point scan for `inf { v > 0 : F(v) <= v }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPointScan {
    pub value: f64,
    /// Every sign change of `F(v) - v` found on the scan grid.
    pub crossings: Vec<f64>,
    /// `F(v) = v` held on a whole grid cell after the first contact.
    pub tangential: bool,
}

/// `inf { v > 0 : F(v) <= v }` for an odd rule, by a sign scan of `F(v) - v`
/// on `SCAN_POINTS` points followed by bisection to `1e-10`.
pub fn fixed_point_xi(rule: &VotingRule) -> Result<FixedPointScan> {
    if !rule.odd_symmetric() {
        return Err(Error::Config(
            "the fixed point is only defined for odd-symmetric rules".into(),
        ));
    }
    let g = |v: f64| f_unchecked(rule, v) - v;
    let below = |v: f64| g(v) <= FIXED_POINT_TOL;
    let h = 1.0 / SCAN_POINTS as f64;
    let grid = |i: usize| if i == SCAN_POINTS { 1.0 } else { i as f64 * h };

    let mut crossings = Vec::new();
    let mut first: Option<usize> = None;
    let mut prev_below = false;
    for i in 1..=SCAN_POINTS {
        let b = below(grid(i));
        if b && !prev_below {
            crossings.push(grid(i));
            first.get_or_insert(i);
        }
        prev_below = b;
    }
    let Some(i) = first else {
        // F(1) = 1 makes the last grid point satisfy the predicate, so this is unreachable
        // for a valid rule.
        return Err(Error::Construction("no fixed point found on (0, 1]".into()));
    };
    if i == 1 {
        return Ok(FixedPointScan {
            value: 0.0,
            crossings,
            tangential: g(grid(1)).abs() <= FIXED_POINT_TOL,
        });
    }
    let value = bisect_predicate(below, grid(i - 1), grid(i), 1e-10);
    for c in crossings.iter_mut().skip(1) {
        *c = bisect_predicate(below, *c - h, *c, 1e-10);
    }
    crossings[0] = value;
    let tangential = i < SCAN_POINTS && g(grid(i + 1)).abs() <= FIXED_POINT_TOL;
    Ok(FixedPointScan {
        value,
        crossings,
        tangential,
    })
}

/// `sup_{v in (0,1]} F(v)/v`, with the `v -> 0` limit `F'(0)` included.
pub fn upsilon(rule: &VotingRule) -> Extremum {
    let grid = grid_sup(|v| f_unchecked(rule, v) / v, 0.0, 1.0, SCAN_POINTS);
    let at_zero = f_prime_unchecked(rule, 0.0);
    if at_zero >= grid.value {
        Extremum {
            value: at_zero,
            argmax: 0.0,
        }
    } else {
        grid
    }
}

/// `Sigma(f, gamma) = sup_{omega in (0,1]} (1 - f gamma^(-omega)) / omega`.
pub fn sigma(f: f64, gamma: f64) -> Result<Extremum> {
    if !(f > 1.0) || !(gamma > 1.0) {
        return Err(Error::Precondition(format!(
            "sigma needs f > 1 and gamma > 1, got f = {f}, gamma = {gamma}"
        )));
    }
    let ln_g = gamma.ln();
    Ok(grid_sup(
        |w| (1.0 - f * (-w * ln_g).exp()) / w,
        0.0,
        1.0,
        SCAN_POINTS,
    ))
}

/// `F(v) <= F'(0) v + KPP_TOL` on a grid of `[0, 1]`.
pub fn kpp_check(rule: &VotingRule) -> bool {
    let slope = f_prime_unchecked(rule, 0.0);
    (0..=SCAN_POINTS).all(|i| {
        let v = i as f64 / SCAN_POINTS as f64;
        f_unchecked(rule, v) <= slope * v + KPP_TOL
    })
}

/// Lower and upper exponential spreading rates `zeta * Sigma(Upsilon, gamma)`
/// and `zeta * Sigma(F'(0), gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedPair {
    pub c_under: f64,
    pub c_over: f64,
    pub zeta: f64,
    pub gamma: f64,
}

/// A voting rule with its derived constants precomputed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Nonlinearity {
    pub rule: VotingRule,
    pub fprime0: f64,
    /// First positive fixed point; `None` when the rule is not odd-symmetric.
    pub xi: Option<FixedPointScan>,
    pub upsilon: Extremum,
    pub is_kpp: bool,
    /// `sup_{[0,1]} F'`.
    pub lipschitz_bound: f64,
}

impl Nonlinearity {
    pub fn new(rule: VotingRule) -> Self {
        let fprime0 = f_prime_unchecked(&rule, 0.0);
        let xi = fixed_point_xi(&rule).ok();
        let upsilon = upsilon(&rule);
        let is_kpp = kpp_check(&rule);
        let lipschitz_bound = (0..=SCAN_POINTS)
            .map(|i| f_prime_unchecked(&rule, i as f64 / SCAN_POINTS as f64))
            .fold(0.0, f64::max);
        Self {
            rule,
            fprime0,
            xi,
            upsilon,
            is_kpp,
            lipschitz_bound,
        }
    }

    pub fn majority(pmf: &BTreeMap<usize, f64>) -> Result<Self> {
        Ok(Self::new(VotingRule::majority(pmf)?))
    }

    /// `F(u)` for `u` clamped into `[-1, 1]`.
    #[inline]
    pub fn f(&self, u: f64) -> f64 {
        f_unchecked(&self.rule, u.clamp(-1.0, 1.0))
    }

    /// `F'(u)` for `u` clamped into `[-1, 1]`.
    #[inline]
    pub fn f_prime(&self, u: f64) -> f64 {
        f_prime_unchecked(&self.rule, u.clamp(-1.0, 1.0))
    }

    /// The first positive fixed point, or an error for rules that are not odd.
    pub fn xi(&self) -> Result<f64> {
        self.xi
            .as_ref()
            .map(|x| x.value)
            .ok_or_else(|| Error::Config("fixed point requested for a non-odd rule".into()))
    }

    pub fn speeds(&self, zeta: f64, gamma: f64) -> Result<SpeedPair> {
        if !(self.fprime0 > 1.0) {
            return Err(Error::Precondition(format!(
                "spreading speeds need F'(0) > 1, got {}",
                self.fprime0
            )));
        }
        if !(zeta > 0.0) {
            return Err(Error::Precondition(format!("zeta must be positive, got {zeta}")));
        }
        Ok(SpeedPair {
            c_under: zeta * sigma(self.upsilon.value, gamma)?.value,
            c_over: zeta * sigma(self.fprime0, gamma)?.value,
            zeta,
            gamma,
        })
    }
}
