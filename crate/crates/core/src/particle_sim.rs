//! Monte Carlo for the accelerated branching Brownian motion with vote and value
//! propagation.
//!
//! A trial is a depth-first walk of the genealogical tree. Each node draws its
//! lifetime, Gaussian displacement, offspring count and threshold rank from its own
//! keyed stream, so the vote walk (which skips children whose votes cannot change
//! the parent's) and the full value walk see identical randomness at every node they
//! both visit.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nonlinearity::VotingRule;
use crate::rng::{child_key, trial_key, StreamRng};

pub const DEFAULT_PARTICLE_CAP: u64 = 1_000_000;
/// Longest substep of the barrier-crossing test in cut-off mode.
pub const CUTOFF_SUBSTEP: f64 = 0.01;
/// Truncated-trial fraction above which an estimate is flagged unreliable.
pub const UNRELIABLE_FRACTION: f64 = 0.01;

fn default_cap() -> u64 {
    DEFAULT_PARTICLE_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub x0: f64,
    pub gamma: f64,
    pub zeta: f64,
    pub horizon: f64,
    /// Absorbing barriers at `+-gamma^k L` for a generation-`k` particle.
    #[serde(default)]
    pub cutoff_l: Option<f64>,
    #[serde(default = "default_cap")]
    pub particle_cap: u64,
    #[serde(default)]
    pub seed: u64,
    /// Generation of the root particle. Generation `k` diffuses with variance rate `gamma^(2k)`.
    #[serde(default)]
    pub start_generation: i32,
}

impl SimConfig {
    pub fn new(x0: f64, gamma: f64, zeta: f64, horizon: f64) -> Self {
        Self {
            x0,
            gamma,
            zeta,
            horizon,
            cutoff_l: None,
            particle_cap: DEFAULT_PARTICLE_CAP,
            seed: 0,
            start_generation: 0,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn cutoff(mut self, l: f64) -> Self {
        self.cutoff_l = Some(l);
        self
    }

    pub fn cap(mut self, cap: u64) -> Self {
        self.particle_cap = cap;
        self
    }

    pub fn generation(mut self, g: i32) -> Self {
        self.start_generation = g;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.gamma >= 1.0) || !self.gamma.is_finite() {
            return bad(format!("gamma must be at least 1, got {}", self.gamma));
        }
        if !(self.zeta > 0.0) || !self.zeta.is_finite() {
            return bad(format!("zeta must be positive, got {}", self.zeta));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return bad(format!("horizon must be nonnegative, got {}", self.horizon));
        }
        if !self.x0.is_finite() {
            return bad(format!("x0 must be finite, got {}", self.x0));
        }
        if self.particle_cap == 0 {
            return bad("particle_cap must be at least 1".into());
        }
        if let Some(l) = self.cutoff_l {
            if !(l > 0.0) {
                return bad(format!("cutoff L must be positive, got {l}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Vote,
    Value,
}

/// One realization: the root vote (`+-1`) or the root value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub value: f64,
    /// Particles alive at the horizon that the walk instantiated. In value mode this is
    /// the population at the horizon; in vote mode only the evaluated part of it.
    pub peak_particles: u64,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    /// Trials that entered the estimate (truncated ones excluded).
    pub trials: u64,
    pub truncated: u64,
    pub unreliable: bool,
    /// `2 P(vote = +1) - 1`, equal to `mean` in vote mode.
    pub u_hat: f64,
}

/// `P(X_t <= x)` estimated from the trials that were not truncated at this point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdfPoint {
    pub x: f64,
    pub p: f64,
    pub std_error: f64,
    pub trials: u64,
    pub truncated: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfEstimate {
    pub points: Vec<CdfPoint>,
    pub unreliable: bool,
}

enum Step {
    Leaf { pos: f64, tie: f64 },
    Branch { y: f64, n: usize, k: usize, remaining: f64 },
}

struct Walker<'a> {
    rule: &'a VotingRule,
    cfg: &'a SimConfig,
    /// Ascending, distinct.
    levels: &'a [f64],
    coin_ties: bool,
    leaves: u64,
    truncated: bool,
    ranks: Vec<u32>,
    values: Vec<f64>,
}

impl<'a> Walker<'a> {
    fn new(rule: &'a VotingRule, cfg: &'a SimConfig, levels: &'a [f64], coin_ties: bool) -> Self {
        Self {
            rule,
            cfg,
            levels,
            coin_ties,
            leaves: 0,
            truncated: false,
            ranks: Vec::new(),
            values: Vec::new(),
        }
    }

    fn step(&mut self, key: u64, generation: i32, x: f64, t_left: f64) -> Step {
        let mut rng = StreamRng::new(key);
        let life = -rng.uniform_open0().ln() / self.cfg.zeta;
        let z: f64 = StandardNormal.sample(&mut rng);
        let tie = rng.uniform();
        let u_arity = rng.uniform();
        let u_rank = rng.uniform();
        let sigma = self.cfg.gamma.powi(generation);
        let d = life.min(t_left);

        let end = match self.cfg.cutoff_l {
            None => x + sigma * d.sqrt() * z,
            Some(l) => match walk_with_barriers(&mut rng, x, d, sigma, sigma * l) {
                Ok(end) => end,
                Err(barrier) => {
                    self.leaves += 1;
                    return Step::Leaf { pos: barrier, tie };
                }
            },
        };
        if life >= t_left || self.leaves >= self.cfg.particle_cap {
            if life < t_left {
                self.truncated = true;
            }
            self.leaves += 1;
            return Step::Leaf { pos: end, tie };
        }
        let n = self.rule.sample_arity(u_arity);
        let k = self.rule.sample_threshold(n, u_rank);
        Step::Branch {
            y: end,
            n,
            k,
            remaining: t_left - life,
        }
    }

    /// Number of levels strictly below `pos`; a tie with a level goes to the coin.
    fn rank_of(&self, pos: f64, tie: f64) -> u32 {
        let below = self.levels.partition_point(|&l| l < pos);
        let on_level = self.levels.get(below).is_some_and(|&l| l == pos);
        (below + usize::from(on_level && self.coin_ties && tie < 0.5)) as u32
    }

    /// Rank of the node's value among the levels, visiting only the children needed
    /// to pin down the `k`-th largest child rank.
    fn lazy(&mut self, key: u64, generation: i32, x: f64, t_left: f64) -> u32 {
        let (y, n, k, remaining) = match self.step(key, generation, x, t_left) {
            Step::Leaf { pos, tie } => return self.rank_of(pos, tie),
            Step::Branch { y, n, k, remaining } => (y, n, k, remaining),
        };
        let top = self.levels.len() as u32;
        let base = self.ranks.len();
        let mut next = 0;
        loop {
            let known = self.ranks.len() - base;
            let unknown = n - known;
            let lower = if k <= known { self.ranks[base + k - 1] } else { 0 };
            let upper = if k <= unknown {
                top
            } else {
                self.ranks[base + k - unknown - 1]
            };
            if lower == upper {
                self.ranks.truncate(base);
                return lower;
            }
            let r = self.lazy(child_key(key, next), generation + 1, y, remaining);
            next += 1;
            // Keep this frame's ranks sorted in decreasing order.
            let at = base + self.ranks[base..].partition_point(|&v| v >= r);
            self.ranks.insert(at, r);
        }
    }

    fn full(&mut self, key: u64, generation: i32, x: f64, t_left: f64) -> f64 {
        let (y, n, k, remaining) = match self.step(key, generation, x, t_left) {
            Step::Leaf { pos, .. } => return pos,
            Step::Branch { y, n, k, remaining } => (y, n, k, remaining),
        };
        let base = self.values.len();
        for i in 0..n {
            let v = self.full(child_key(key, i), generation + 1, y, remaining);
            self.values.push(v);
        }
        let kids = &mut self.values[base..];
        kids.sort_unstable_by(|a, b| b.total_cmp(a));
        let v = kids[k - 1];
        self.values.truncate(base);
        v
    }
}

/// Moves a particle for time `d` in substeps, testing both barriers with the Brownian
/// bridge crossing probability. Returns the end point, or `Err(barrier)` on absorption.
fn walk_with_barriers(rng: &mut StreamRng, x: f64, d: f64, sigma: f64, b: f64) -> Result<f64, f64> {
    if x >= b {
        return Err(b);
    }
    if x <= -b {
        return Err(-b);
    }
    let mut pos = x;
    let mut s = 0.0;
    while s < d {
        let dt = CUTOFF_SUBSTEP.min(d - s);
        let z: f64 = StandardNormal.sample(rng);
        let next = pos + sigma * dt.sqrt() * z;
        if next >= b {
            return Err(b);
        }
        if next <= -b {
            return Err(-b);
        }
        let var = sigma * sigma * dt;
        let p_up = (-2.0 * (b - pos) * (b - next) / var).exp();
        let p_down = (-2.0 * (b + pos) * (b + next) / var).exp();
        let u = rng.uniform();
        if u < p_up {
            return Err(b);
        }
        if u > 1.0 - p_down {
            return Err(-b);
        }
        pos = next;
        s += dt;
    }
    Ok(pos)
}

/// Vote of trial `trial`: leaves vote `sgn(position)`, `sgn(0)` by a fair coin.
pub fn vote_trial(rule: &VotingRule, cfg: &SimConfig, trial: u64) -> TrialOutcome {
    let mut w = Walker::new(rule, cfg, &[0.0], true);
    let r = w.lazy(trial_key(cfg.seed, trial), cfg.start_generation, cfg.x0, cfg.horizon);
    TrialOutcome {
        value: if r == 1 { 1.0 } else { -1.0 },
        peak_particles: w.leaves,
        truncated: w.truncated,
    }
}

/// Root value `X_t` of trial `trial`.
pub fn value_trial(rule: &VotingRule, cfg: &SimConfig, trial: u64) -> TrialOutcome {
    let mut w = Walker::new(rule, cfg, &[], false);
    let v = w.full(trial_key(cfg.seed, trial), cfg.start_generation, cfg.x0, cfg.horizon);
    TrialOutcome {
        value: v,
        peak_particles: w.leaves,
        truncated: w.truncated,
    }
}

/// Number of `levels` (ascending, distinct) strictly below `X_t` for trial `trial`,
/// computed without building the full tree. Returns `(rank, leaves, truncated)`.
pub fn exceedance_trial(
    rule: &VotingRule,
    cfg: &SimConfig,
    levels: &[f64],
    trial: u64,
) -> (u32, u64, bool) {
    let mut w = Walker::new(rule, cfg, levels, false);
    let r = w.lazy(trial_key(cfg.seed, trial), cfg.start_generation, cfg.x0, cfg.horizon);
    (r, w.leaves, w.truncated)
}

pub fn simulate_vote(rule: &VotingRule, cfg: &SimConfig) -> Result<TrialOutcome> {
    cfg.validate()?;
    Ok(vote_trial(rule, cfg, 0))
}

pub fn simulate_value(rule: &VotingRule, cfg: &SimConfig) -> Result<TrialOutcome> {
    cfg.validate()?;
    Ok(value_trial(rule, cfg, 0))
}

pub fn simulate_vote_cutoff(rule: &VotingRule, cfg: &SimConfig) -> Result<TrialOutcome> {
    if cfg.cutoff_l.is_none() {
        return Err(Error::Config("cut-off simulation needs cutoff_l".into()));
    }
    simulate_vote(rule, cfg)
}

/// Runs `trials` independent trials in parallel, in trial order.
pub fn run_trials(rule: &VotingRule, cfg: &SimConfig, mode: Mode, trials: u64) -> Result<Vec<TrialOutcome>> {
    cfg.validate()?;
    if cfg.cutoff_l.is_some() && mode == Mode::Value {
        return Err(Error::Config("value mode does not support cut-off barriers".into()));
    }
    Ok((0..trials)
        .into_par_iter()
        .map(|t| match mode {
            Mode::Vote => vote_trial(rule, cfg, t),
            Mode::Value => value_trial(rule, cfg, t),
        })
        .collect())
}

/// Sample mean and standard error over the non-truncated outcomes.
pub fn summarize(outcomes: &[TrialOutcome]) -> Estimate {
    let kept: Vec<f64> = outcomes.iter().filter(|o| !o.truncated).map(|o| o.value).collect();
    let truncated = (outcomes.len() - kept.len()) as u64;
    let n = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / n;
    let var = if kept.len() > 1 {
        kept.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Estimate {
        mean,
        std_error: (var / n).sqrt(),
        trials: kept.len() as u64,
        truncated,
        unreliable: truncated as f64 > UNRELIABLE_FRACTION * outcomes.len() as f64,
        u_hat: mean,
    }
}

/// `u(t, x0) = 2 P(vote = +1) - 1` from `trials` vote-mode trials.
pub fn estimate_u(rule: &VotingRule, cfg: &SimConfig, trials: u64) -> Result<Estimate> {
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    Ok(summarize(&run_trials(rule, cfg, Mode::Vote, trials)?))
}

/// Empirical `P(X_t <= x)` at each query point, with binomial standard errors.
///
/// Each point is a separate single-level walk over the same trial keys, so the
/// estimates are coupled: a trial with `X_t <= x` also has `X_t <= x'` for `x' > x`.
pub fn estimate_value_cdf(
    rule: &VotingRule,
    cfg: &SimConfig,
    trials: u64,
    query: &[f64],
) -> Result<CdfEstimate> {
    cfg.validate()?;
    if cfg.x0 != 0.0 {
        return Err(Error::Precondition(format!(
            "the value distribution is defined for x0 = 0, got {}",
            cfg.x0
        )));
    }
    if trials == 0 {
        return Err(Error::Config("need at least one trial".into()));
    }
    if cfg.cutoff_l.is_some() {
        return Err(Error::Config("value mode does not support cut-off barriers".into()));
    }
    if query.iter().any(|x| !x.is_finite()) {
        return Err(Error::Config("query points must be finite".into()));
    }
    let points: Vec<CdfPoint> = query
        .iter()
        .map(|&x| {
            let (below, truncated) = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let (r, _, trunc) = exceedance_trial(rule, cfg, &[x], t);
                    match (trunc, r) {
                        (true, _) => (0u64, 1u64),
                        (false, 0) => (1, 0),
                        (false, _) => (0, 0),
                    }
                })
                .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
            let kept = trials - truncated;
            let n = kept as f64;
            let p = below as f64 / n;
            CdfPoint {
                x,
                p,
                std_error: (p * (1.0 - p) / n).sqrt(),
                trials: kept,
                truncated,
            }
        })
        .collect();
    let unreliable = points
        .iter()
        .any(|p| p.truncated as f64 > UNRELIABLE_FRACTION * trials as f64);
    Ok(CdfEstimate { points, unreliable })
}

/// Per-trial records as `trial,vote_or_value,peak_particles,truncated`.
pub fn write_trials_csv(path: &Path, outcomes: &[TrialOutcome]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "trial,vote_or_value,peak_particles,truncated")?;
    for (i, o) in outcomes.iter().enumerate() {
        writeln!(out, "{i},{},{},{}", o.value, o.peak_particles, o.truncated)?;
    }
    out.flush()?;
    Ok(())
}
