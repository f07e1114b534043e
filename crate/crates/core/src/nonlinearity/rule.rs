use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOL: f64 = 1e-12;

/// Offspring distribution together with the random-threshold voting law.
///
/// A particle with `n` children draws a threshold `k` with probability
/// `eta(n, k)` and votes `+1` iff at least `k` children voted `+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VotingRule {
    /// `pmf[n]` is the probability of `n` children; `pmf[0] == 0`.
    pmf: Vec<f64>,
    /// `thresholds[n][k - 1] = eta(n, k)`; empty for arities outside the support.
    thresholds: Vec<Vec<f64>>,
    /// Cumulative offspring law, used for sampling.
    pmf_cdf: Vec<f64>,
    /// `threshold_cdf[n][j] = sum_{k <= j} eta(n, k)` for `j = 0..=n`.
    threshold_cdf: Vec<Vec<f64>>,
    odd_symmetric: bool,
}

impl VotingRule {
    /// Builds and validates a rule from an offspring pmf and per-arity threshold laws.
    /// Every arity with positive probability needs a threshold vector of length `n`.
    pub fn new(pmf: &BTreeMap<usize, f64>, thresholds: &BTreeMap<usize, Vec<f64>>) -> Result<Self> {
        validate_pmf(pmf)?;
        let n_max = pmf
            .iter()
            .filter(|(_, &p)| p > 0.0)
            .map(|(&n, _)| n)
            .max()
            .unwrap_or(0);
        let mut dense = vec![0.0; n_max + 1];
        let mut eta = vec![Vec::new(); n_max + 1];
        for (&n, &p) in pmf {
            if p == 0.0 {
                continue;
            }
            dense[n] = p;
            let t = thresholds.get(&n).ok_or_else(|| Error::InvalidThresholds {
                arity: n,
                reason: "missing threshold vector".into(),
            })?;
            validate_thresholds(n, t)?;
            eta[n] = t.clone();
        }
        Ok(Self::from_dense(dense, eta))
    }

    /// Majority vote with fair coin tie-breaking:
    /// `eta(n, k) = (delta(k, floor((n+1)/2)) + delta(k, ceil((n+1)/2))) / 2`.
    pub fn majority(pmf: &BTreeMap<usize, f64>) -> Result<Self> {
        validate_pmf(pmf)?;
        let thresholds = pmf
            .keys()
            .map(|&n| {
                let mut t = vec![0.0; n];
                let lo = (n + 1) / 2;
                let hi = (n + 2) / 2;
                t[lo - 1] += 0.5;
                t[hi - 1] += 0.5;
                (n, t)
            })
            .collect();
        Self::new(pmf, &thresholds)
    }

    /// Majority rule with a single arity, e.g. `majority_fixed(3)`.
    pub fn majority_fixed(n: usize) -> Result<Self> {
        Self::majority(&BTreeMap::from([(n, 1.0)]))
    }

    fn from_dense(pmf: Vec<f64>, thresholds: Vec<Vec<f64>>) -> Self {
        let mut acc = 0.0;
        let pmf_cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        let threshold_cdf = thresholds
            .iter()
            .map(|t| {
                let mut c = Vec::with_capacity(t.len() + 1);
                let mut s = 0.0;
                c.push(0.0);
                for &e in t {
                    s += e;
                    c.push(s);
                }
                c
            })
            .collect();
        let odd_symmetric = thresholds.iter().enumerate().all(|(n, t)| {
            t.is_empty() || (1..=n).all(|k| (t[k - 1] - t[n - k]).abs() <= SUM_TOL)
        });
        Self {
            pmf,
            thresholds,
            pmf_cdf,
            threshold_cdf,
            odd_symmetric,
        }
    }

    pub fn max_arity(&self) -> usize {
        self.pmf.len() - 1
    }

    pub fn odd_symmetric(&self) -> bool {
        self.odd_symmetric
    }

    /// Probability of exactly `n` children.
    pub fn p(&self, n: usize) -> f64 {
        self.pmf.get(n).copied().unwrap_or(0.0)
    }

    /// `eta(n, k)` for `1 <= k <= n`; zero outside the support.
    pub fn eta(&self, n: usize, k: usize) -> f64 {
        self.thresholds
            .get(n)
            .and_then(|t| t.get(k.wrapping_sub(1)))
            .copied()
            .unwrap_or(0.0)
    }

    /// Arities with positive probability, ascending.
    pub fn support(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.pmf.iter().copied().enumerate().filter(|&(_, p)| p > 0.0)
    }

    pub fn mean_offspring(&self) -> f64 {
        self.support().map(|(n, p)| n as f64 * p).sum()
    }

    /// `sum_{k <= j} eta(n, k)`.
    pub(crate) fn threshold_cdf(&self, n: usize) -> &[f64] {
        &self.threshold_cdf[n]
    }

    /// Inverse-cdf sample of the number of children from a uniform `u` in `[0, 1)`.
    pub fn sample_arity(&self, u: f64) -> usize {
        let n = self.pmf_cdf.partition_point(|&c| c <= u);
        // Rounding can leave the final cumulative sum just under one.
        n.min(self.max_arity())
    }

    /// Inverse-cdf sample of the threshold for a particle with `n` children.
    pub fn sample_threshold(&self, n: usize, u: f64) -> usize {
        let c = &self.threshold_cdf[n];
        let k = c[1..].partition_point(|&v| v <= u) + 1;
        k.min(n)
    }
}

fn validate_pmf(pmf: &BTreeMap<usize, f64>) -> Result<()> {
    if pmf.is_empty() {
        return Err(Error::InvalidPmf {
            arity: 0,
            reason: "empty offspring distribution".into(),
        });
    }
    for (&n, &p) in pmf {
        if n == 0 {
            return Err(Error::InvalidPmf {
                arity: 0,
                reason: "arity must be at least 1".into(),
            });
        }
        if !(p >= 0.0) || !p.is_finite() {
            return Err(Error::InvalidPmf {
                arity: n,
                reason: format!("probability {p} is not a nonnegative number"),
            });
        }
    }
    let total: f64 = pmf.values().sum();
    if (total - 1.0).abs() > SUM_TOL {
        let arity = *pmf.keys().next_back().unwrap();
        return Err(Error::InvalidPmf {
            arity,
            reason: format!("probabilities sum to {total}, not 1"),
        });
    }
    Ok(())
}

fn validate_thresholds(n: usize, t: &[f64]) -> Result<()> {
    if t.len() != n {
        return Err(Error::InvalidThresholds {
            arity: n,
            reason: format!("expected {n} entries, got {}", t.len()),
        });
    }
    if let Some(bad) = t.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::InvalidThresholds {
            arity: n,
            reason: format!("negative entry {bad}"),
        });
    }
    let s: f64 = t.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::InvalidThresholds {
            arity: n,
            reason: format!("entries sum to {s}, not 1"),
        });
    }
    Ok(())
}
