//! Binomial coefficients and probability mass functions.

use statrs::function::gamma::ln_gamma;

/// Largest `n` for which coefficients are computed in exact integer arithmetic.
pub const EXACT_LIMIT: usize = 60;

/// `C(n, k)`; exact below [`EXACT_LIMIT`], log-gamma above.
pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    if n <= EXACT_LIMIT {
        let mut c: u128 = 1;
        for i in 0..k {
            // c * (n - i) / (i + 1) stays integral at every step.
            c = c * (n - i) as u128 / (i + 1) as u128;
        }
        c as f64
    } else {
        ln_binomial(n, k).exp()
    }
}

pub fn ln_binomial(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Fills `out[j] = C(n, j) q^j (1-q)^(n-j)` for `j = 0..=n`.
pub fn binomial_pmf_into(n: usize, q: f64, out: &mut Vec<f64>) {
    out.clear();
    if q <= 0.0 {
        out.resize(n + 1, 0.0);
        out[0] = 1.0;
        return;
    }
    if q >= 1.0 {
        out.resize(n + 1, 0.0);
        out[n] = 1.0;
        return;
    }
    let p = 1.0 - q;
    if n <= EXACT_LIMIT {
        for j in 0..=n {
            out.push(binomial(n, j) * q.powi(j as i32) * p.powi((n - j) as i32));
        }
    } else {
        let (lq, lp) = (q.ln(), p.ln());
        for j in 0..=n {
            out.push((ln_binomial(n, j) + j as f64 * lq + (n - j) as f64 * lp).exp());
        }
    }
}

/// `sum_j C(n, j) q^j (1-q)^(n-j) c(j)` without allocating.
///
/// Below [`EXACT_LIMIT`] the pmf is generated by the ratio recurrence, started from
/// whichever end carries at least `2^-n` of mass so nothing underflows prematurely.
pub fn binomial_expectation<C: Fn(usize) -> f64>(n: usize, q: f64, c: C) -> f64 {
    if q <= 0.0 {
        return c(0);
    }
    if q >= 1.0 {
        return c(n);
    }
    let p = 1.0 - q;
    if n > EXACT_LIMIT {
        let (lq, lp) = (q.ln(), p.ln());
        return (0..=n)
            .map(|j| (ln_binomial(n, j) + j as f64 * lq + (n - j) as f64 * lp).exp() * c(j))
            .sum();
    }
    let mut acc = 0.0;
    if q <= 0.5 {
        let r = q / p;
        let mut t = p.powi(n as i32);
        for j in 0..=n {
            acc += t * c(j);
            t *= r * (n - j) as f64 / (j + 1) as f64;
        }
    } else {
        let r = p / q;
        let mut t = q.powi(n as i32);
        for j in (0..=n).rev() {
            acc += t * c(j);
            t *= r * j as f64 / (n - j + 1) as f64;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_coefficients_are_exact() {
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(60, 30), 118_264_581_564_861_424_f64);
        assert_eq!(binomial(3, 4), 0.0);
    }

    #[test]
    fn log_gamma_branch_is_accurate() {
        // C(61, 30) = C(60, 30) * 61 / 31
        let exact = 118_264_581_564_861_424_f64 * 61.0 / 31.0;
        let rel = (binomial(61, 30) - exact).abs() / exact;
        assert!(rel < 1e-13, "relative error {rel}");
    }

    #[test]
    fn pmf_sums_to_one() {
        let mut v = Vec::new();
        for &n in &[1usize, 4, 17, 80] {
            binomial_pmf_into(n, 0.37, &mut v);
            let s: f64 = v.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "n={n} sum={s}");
        }
    }

    #[test]
    fn expectation_matches_pmf() {
        let mut v = Vec::new();
        for &n in &[1usize, 3, 17, 60, 75] {
            for &q in &[0.0, 1e-9, 0.2, 0.5, 0.73, 1.0 - 1e-9, 1.0] {
                binomial_pmf_into(n, q, &mut v);
                let direct: f64 = v.iter().enumerate().map(|(j, b)| b * (j as f64).sqrt()).sum();
                let fast = binomial_expectation(n, q, |j| (j as f64).sqrt());
                assert!((direct - fast).abs() < 1e-12 * (1.0 + direct), "n={n} q={q}");
            }
        }
    }
}
