//! Small scalar routines shared by the extremal computations.

use serde::{Deserialize, Serialize};

/// A supremum (or infimum) together with the point that attains it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extremum {
    pub value: f64,
    pub argmax: f64,
}

/// Golden-section search for the maximum of a unimodal `f` on `[a, b]`.
/// Returns the best point seen, including both endpoints.
pub fn golden_max<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> Extremum {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut best = Extremum { value: f(a), argmax: a };
    let fb = f(b);
    if fb > best.value {
        best = Extremum { value: fb, argmax: b };
    }
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
    }
    for (x, v) in [(c, fc), (d, fd)] {
        if v > best.value {
            best = Extremum { value: v, argmax: x };
        }
    }
    best
}

/// Dense-grid supremum of `f` over the points `lo + (hi - lo) * i / n`, `i = 1..=n`,
/// refined by golden-section search on the two cells around the grid argmax.
/// The right endpoint is always evaluated exactly.
pub fn grid_sup<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, n: usize) -> Extremum {
    let h = (hi - lo) / n as f64;
    let mut best_i = n;
    let mut best = f(hi);
    for i in 1..n {
        let v = f(lo + h * i as f64);
        if v > best {
            best = v;
            best_i = i;
        }
    }
    let x = if best_i == n { hi } else { lo + h * best_i as f64 };
    let left = (x - h).max(lo + 0.5 * h);
    let right = (x + h).min(hi);
    let refined = golden_max(&f, left, right, 1e-13 * (1.0 + hi.abs()));
    if refined.value > best {
        refined
    } else {
        Extremum { value: best, argmax: x }
    }
}

/// Bisection for the boundary of a predicate that is false at `a` and true at `b`.
/// Returns the left-most point found where the predicate holds, to within `tol`.
pub fn bisect_predicate<P: Fn(f64) -> bool>(pred: P, mut a: f64, mut b: f64, tol: f64) -> f64 {
    while b - a > tol {
        let m = 0.5 * (a + b);
        if pred(m) {
            b = m;
        } else {
            a = m;
        }
    }
    b
}

/// Ordinary least squares fit `y = intercept + slope * x`, returning
/// `(slope, intercept, slope_standard_error)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - intercept - slope * x;
            r * r
        })
        .sum();
    let se = if xs.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    (slope, intercept, se)
}
