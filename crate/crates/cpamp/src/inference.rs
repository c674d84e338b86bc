//! Change-point inference from AMP output.
//!
//! Row likelihoods are stored as prefix sums over samples, so the
//! log-likelihood of a configuration costs O(L) and a posterior over every
//! admissible configuration is a single pass over the enumeration.

use crate::denoise::ThetaChannel;
use crate::error::{invalid, CpampError, Result};
use crate::model::{eta_to_psi, ChangePointVector, ModelKind};
use crate::priors::ChangePointPrior;
use crate::se::{SeParams, SeTrajectory, StateEvolution};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Per-sample, per-label log-likelihoods held as column prefix sums.
#[derive(Debug, Clone)]
pub struct LogLikTable {
    n: usize,
    l: usize,
    /// (n + 1) x L, row-major: prefix[i * l + k] = sum of the finite ll[r][k], r < i.
    prefix: Vec<f64>,
    /// Same layout, counting the -inf entries.
    zeros: Vec<u32>,
}

impl LogLikTable {
    /// From an n x L matrix of log-likelihoods (-inf allowed, NaN and +inf rejected).
    pub fn from_rows(rows: &DMatrix<f64>) -> Result<Self> {
        let (n, l) = rows.shape();
        if n == 0 || l == 0 {
            return invalid("empty likelihood table");
        }
        if rows.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return invalid("likelihood table contains NaN or +inf");
        }
        let mut prefix = vec![0.0; (n + 1) * l];
        let mut zeros = vec![0u32; (n + 1) * l];
        for i in 0..n {
            for k in 0..l {
                let x = rows[(i, k)];
                let finite = x.is_finite();
                prefix[(i + 1) * l + k] = prefix[i * l + k] + if finite { x } else { 0.0 };
                zeros[(i + 1) * l + k] = zeros[i * l + k] + u32::from(!finite);
            }
        }
        Ok(LogLikTable { n, l, prefix, zeros })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    /// Sum over 0-based rows [start, end) under 0-based label k.
    pub fn segment(&self, start: usize, end: usize, k: usize) -> f64 {
        if self.zeros[end * self.l + k] > self.zeros[start * self.l + k] {
            return f64::NEG_INFINITY;
        }
        self.prefix[end * self.l + k] - self.prefix[start * self.l + k]
    }

    /// Log-likelihood of a configuration (segment j gets label j).
    pub fn config(&self, eta: &ChangePointVector) -> Result<f64> {
        if eta.n != self.n {
            return Err(CpampError::DimensionMismatch(format!("configuration is for n={}, table has n={}", eta.n, self.n)));
        }
        if eta.len() + 1 > self.l {
            return invalid(format!("{} change points need more than L={} labels", eta.len(), self.l));
        }
        let mut start = 0;
        let mut total = 0.0;
        for (k, &b) in eta.boundaries().iter().chain(std::iter::once(&self.n)).enumerate() {
            total += self.segment(start, b, k);
            start = b;
        }
        Ok(total)
    }
}

/// Log-likelihood rows log p(Theta_i, y_i | psi_i = k) under a channel.
pub fn channel_loglik_rows(theta: &DMatrix<f64>, y: &[f64], channel: &ThetaChannel) -> Result<DMatrix<f64>> {
    check_shapes(theta, y, channel.l())?;
    let (n, l) = theta.shape();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let v: Vec<f64> = theta.row(i).iter().cloned().collect();
            channel.log_lik_row(&v, y[i])
        })
        .collect();
    Ok(DMatrix::from_fn(n, l, |i, k| rows[i][k]))
}

/// Likelihood table of the approximate (configuration-independent) channel.
pub fn approx_loglik_table(theta: &DMatrix<f64>, y: &[f64], channel: &ThetaChannel) -> Result<LogLikTable> {
    LogLikTable::from_rows(&channel_loglik_rows(theta, y, channel)?)
}

/// Negative squared residuals -(y_i - Theta_ik)^2, for least-squares matching.
pub fn l2_table(theta: &DMatrix<f64>, y: &[f64]) -> Result<LogLikTable> {
    check_shapes(theta, y, theta.ncols())?;
    LogLikTable::from_rows(&DMatrix::from_fn(theta.nrows(), theta.ncols(), |i, k| -(y[i] - theta[(i, k)]).powi(2)))
}

fn check_shapes(theta: &DMatrix<f64>, y: &[f64], l: usize) -> Result<()> {
    if theta.nrows() != y.len() {
        return Err(CpampError::DimensionMismatch(format!("Theta has {} rows, y has {}", theta.nrows(), y.len())));
    }
    if theta.ncols() != l {
        return Err(CpampError::DimensionMismatch(format!("Theta has {} columns, expected {l}", theta.ncols())));
    }
    Ok(())
}

/// Log of sum of exponentials; -inf for an empty or all -inf input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Posterior over an explicit list of configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub configs: Vec<ChangePointVector>,
    pub log_prior: Vec<f64>,
    pub log_lik: Vec<f64>,
    pub prob: Vec<f64>,
    pub log_evidence: f64,
}

impl PosteriorTable {
    pub fn from_parts(configs: Vec<ChangePointVector>, log_prior: Vec<f64>, log_lik: Vec<f64>) -> Result<Self> {
        if configs.is_empty() || configs.len() != log_prior.len() || configs.len() != log_lik.len() {
            return invalid("posterior needs equally long, non-empty config, prior and likelihood lists");
        }
        let joint: Vec<f64> = log_prior.iter().zip(&log_lik).map(|(a, b)| a + b).collect();
        let log_evidence = log_sum_exp(&joint);
        if !log_evidence.is_finite() {
            return invalid("every configuration has zero posterior weight");
        }
        let prob = joint.iter().map(|j| (j - log_evidence).exp()).collect();
        Ok(PosteriorTable { configs, log_prior, log_lik, prob, log_evidence })
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Index of the mode; ties go to the earliest entry.
    pub fn argmax_index(&self) -> usize {
        let joint = |i: usize| self.log_prior[i] + self.log_lik[i];
        (1..self.len()).fold(0, |best, i| if joint(i) > joint(best) { i } else { best })
    }

    pub fn argmax(&self) -> &ChangePointVector {
        &self.configs[self.argmax_index()]
    }

    pub fn prob_of(&self, eta: &ChangePointVector) -> f64 {
        self.configs.iter().position(|c| c == eta).map_or(0.0, |i| self.prob[i])
    }

    /// Posterior law of the number of change points, indexed 0..max_count.
    pub fn count_probs(&self) -> Vec<f64> {
        let kmax = self.configs.iter().map(|c| c.len()).max().unwrap_or(0);
        let mut out = vec![0.0; kmax + 1];
        for (c, p) in self.configs.iter().zip(&self.prob) {
            out[c.len()] += p;
        }
        out
    }

    /// P(a change point at 1-based index i), returned for i = 1..=n (entry i - 1).
    pub fn location_probs(&self) -> Vec<f64> {
        let n = self.configs[0].n;
        let mut out = vec![0.0; n];
        for (c, p) in self.configs.iter().zip(&self.prob) {
            for &e in &c.eta {
                out[e - 1] += p;
            }
        }
        out
    }

    fn check_aligned(&self, other: &PosteriorTable) -> Result<()> {
        if self.configs != other.configs {
            return invalid("posterior tables are over different configurations");
        }
        Ok(())
    }

    /// Mean over configurations of |p - q|.
    pub fn mean_abs_gap(&self, other: &PosteriorTable) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self.prob.iter().zip(&other.prob).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.len() as f64)
    }

    /// Total-variation distance (half the L1 distance).
    pub fn total_variation(&self, other: &PosteriorTable) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(0.5 * self.prob.iter().zip(&other.prob).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

/// Posterior over every admissible configuration of `prior`.
pub fn posterior_from_table(table: &LogLikTable, prior: &ChangePointPrior) -> Result<PosteriorTable> {
    if table.n() != prior.n {
        return Err(CpampError::DimensionMismatch(format!("table has n={}, prior has n={}", table.n(), prior.n)));
    }
    let enumerated = prior.enumerate_configs()?;
    let log_lik = enumerated.par_iter().map(|(c, _)| table.config(c)).collect::<Result<Vec<_>>>()?;
    let (configs, weights): (Vec<_>, Vec<_>) = enumerated.into_iter().unzip();
    let log_prior = weights.iter().map(|w: &f64| w.ln()).collect();
    PosteriorTable::from_parts(configs, log_prior, log_lik)
}

/// Approximate posterior p(eta | Theta, y) under the ensemble channel.
pub fn approximate_posterior(
    theta: &DMatrix<f64>,
    y: &[f64],
    channel: &ThetaChannel,
    prior: &ChangePointPrior,
) -> Result<PosteriorTable> {
    posterior_from_table(&approx_loglik_table(theta, y, channel)?, prior)
}

/// Change-point point estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Mode of the approximate posterior.
    PosteriorArgmax,
    /// Least-squares assignment of y to the columns of Theta (linear model only).
    L2Match,
    /// Adds one change point at a time by likelihood, then picks the best prefix by posterior.
    Greedy,
}

impl Estimator {
    pub fn name(&self) -> &'static str {
        match self {
            Estimator::PosteriorArgmax => "posterior_argmax",
            Estimator::L2Match => "l2_match",
            Estimator::Greedy => "greedy",
        }
    }
}

/// Point estimate of the change points from (Theta, y).
pub fn estimate(
    estimator: Estimator,
    theta: &DMatrix<f64>,
    y: &[f64],
    channel: &ThetaChannel,
    prior: &ChangePointPrior,
    model: ModelKind,
) -> Result<ChangePointVector> {
    match estimator {
        Estimator::PosteriorArgmax => Ok(approximate_posterior(theta, y, channel, prior)?.argmax().clone()),
        Estimator::L2Match => {
            if !matches!(model, ModelKind::Linear { .. }) {
                return invalid("l2_match is only defined for the linear model");
            }
            support_argmax(&l2_table(theta, y)?, prior)
        }
        Estimator::Greedy => greedy(&approx_loglik_table(theta, y, channel)?, prior),
    }
}

/// Configuration maximizing the table likelihood over the prior support (weights ignored).
fn support_argmax(table: &LogLikTable, prior: &ChangePointPrior) -> Result<ChangePointVector> {
    let configs = prior.enumerate_configs()?;
    let mut best: Option<(f64, &ChangePointVector)> = None;
    for (c, _) in &configs {
        let v = table.config(c)?;
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, c));
        }
    }
    best.map(|(_, c)| c.clone()).ok_or_else(|| CpampError::InvalidArgument("prior has no admissible configuration".into()))
}

/// Greedy forward selection on the prior's grid, respecting its minimum
/// segment length. Each round adds the change point with the largest
/// likelihood gain; the final answer is the prefix with the highest posterior
/// weight among those the prior admits.
pub fn greedy(table: &LogLikTable, prior: &ChangePointPrior) -> Result<ChangePointVector> {
    let n = prior.n;
    if table.n() != n {
        return Err(CpampError::DimensionMismatch(format!("table has n={}, prior has n={n}", table.n())));
    }
    let d = prior.min_separation;
    let mut current: Vec<usize> = Vec::new();
    let mut path = vec![ChangePointVector::new(vec![], n)?];
    for _ in 1..prior.l.min(table.l()) {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for c in (0..n).step_by(prior.grid_stride) {
            if c == 0 || current.contains(&c) {
                continue;
            }
            let mut cand = current.clone();
            cand.push(c);
            cand.sort_unstable();
            let mut prev = 0;
            let ok = cand.iter().all(|&b| {
                let fits = b >= prev + d;
                prev = b;
                fits
            }) && n - prev >= d;
            if !ok {
                continue;
            }
            let eta = ChangePointVector::new(cand.iter().map(|b| b + 1).collect(), n)?;
            let v = table.config(&eta)?;
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, cand));
            }
        }
        match best {
            Some((_, cand)) => {
                current = cand;
                path.push(ChangePointVector::new(current.iter().map(|b| b + 1).collect(), n)?);
            }
            None => break,
        }
    }
    let mut best: Option<(f64, &ChangePointVector)> = None;
    for eta in &path {
        let lp = prior.log_prob(eta);
        if lp == f64::NEG_INFINITY {
            continue;
        }
        let v = lp + table.config(eta)?;
        if best.is_none_or(|(b, _)| v > b) {
            best = Some((v, eta));
        }
    }
    best.map(|(_, c)| c.clone())
        .ok_or_else(|| CpampError::InvalidArgument("greedy path contains no configuration the prior admits".into()))
}

/// Hausdorff distance between two change-point sets, in samples.
/// Both empty gives 0; exactly one empty gives n.
pub fn hausdorff(a: &ChangePointVector, b: &ChangePointVector) -> Result<usize> {
    if a.n != b.n {
        return Err(CpampError::DimensionMismatch(format!("n={} vs n={}", a.n, b.n)));
    }
    match (a.is_empty(), b.is_empty()) {
        (true, true) => return Ok(0),
        (true, false) | (false, true) => return Ok(a.n),
        _ => {}
    }
    let directed = |x: &[usize], y: &[usize]| {
        x.iter().map(|&p| y.iter().map(|&q| p.abs_diff(q)).min().unwrap()).max().unwrap()
    };
    Ok(directed(&a.eta, &b.eta).max(directed(&b.eta, &a.eta)))
}

/// Fractions rounded to 1e-3 (as thousandths) and the configuration they stand for.
fn memo_key(eta: &ChangePointVector) -> (Vec<u64>, ChangePointVector) {
    let n = eta.n as f64;
    let key: Vec<u64> = eta.eta.iter().map(|&e| (1000.0 * e as f64 / n).round() as u64).collect();
    let canon: Vec<usize> = key.iter().map(|&k| ((k as f64 * n / 1000.0).round() as usize).clamp(2, eta.n)).collect();
    match ChangePointVector::new(canon, eta.n) {
        Ok(c) => (key, c),
        // Rounding merged two change points; fall back to the exact configuration.
        Err(_) => (eta.eta.iter().map(|&e| e as u64 + 1_000_000).collect(), eta.clone()),
    }
}

/// Exact likelihood p(Theta, y | eta) in the large-system limit. Each candidate
/// eta has its own oracle state evolution, run once and memoized.
pub struct ExactLikelihood<'a> {
    se: &'a StateEvolution,
    ensemble: SeTrajectory,
    t: usize,
    memo: Mutex<HashMap<Vec<u64>, SeParams>>,
    runs: AtomicUsize,
}

impl<'a> ExactLikelihood<'a> {
    /// Likelihood of the iterate at step `t` of `ensemble`.
    pub fn new(se: &'a StateEvolution, ensemble: &SeTrajectory, t: usize) -> Result<Self> {
        if t >= ensemble.params.len() {
            return invalid(format!("iteration {t} is beyond the trajectory ({} steps)", ensemble.params.len() - 1));
        }
        let mut ensemble = ensemble.clone();
        ensemble.params.truncate(t + 1);
        ensemble.stats.truncate(t);
        Ok(ExactLikelihood { se, ensemble, t, memo: Mutex::new(HashMap::new()), runs: AtomicUsize::new(0) })
    }

    pub fn iteration(&self) -> usize {
        self.t
    }

    /// Number of oracle trajectories computed so far.
    pub fn oracle_runs(&self) -> usize {
        self.runs.load(Ordering::Relaxed)
    }

    /// Oracle parameters at step t when the true change points are `eta`.
    /// Candidates whose fractions agree after rounding to 1e-3 share one run,
    /// made at the canonical configuration of that rounded fraction tuple.
    pub fn oracle_params(&self, eta: &ChangePointVector) -> Result<SeParams> {
        let (key, canonical) = memo_key(eta);
        if let Some(p) = self.memo.lock().unwrap().get(&key) {
            return Ok(p.clone());
        }
        let traj = self.se.run_oracle(&self.ensemble, &canonical)?;
        self.runs.fetch_add(1, Ordering::Relaxed);
        let p = traj.params[self.t].clone();
        self.memo.lock().unwrap().entry(key).or_insert(p.clone());
        Ok(p)
    }

    /// Computes (in parallel) the oracle parameters of every listed candidate.
    pub fn prepare(&self, candidates: &[ChangePointVector]) -> Result<()> {
        candidates.par_iter().try_for_each(|c| self.oracle_params(c).map(|_| ()))
    }

    /// log p(Theta, y | eta).
    pub fn loglik(&self, theta: &DMatrix<f64>, y: &[f64], eta: &ChangePointVector) -> Result<f64> {
        let params = self.oracle_params(eta)?;
        let channel = ThetaChannel::new(&params.rho, &params.nu_theta, &params.kappa_theta, self.se.model)?;
        check_shapes(theta, y, channel.l())?;
        let psi = eta_to_psi(eta, theta.nrows(), channel.l())?.psi;
        let mut total = 0.0;
        for i in 0..theta.nrows() {
            let v: Vec<f64> = theta.row(i).iter().cloned().collect();
            total += channel.log_lik_row(&v, y[i])[psi[i] - 1];
        }
        Ok(total)
    }

    /// Exact posterior over every admissible configuration of `prior`.
    pub fn posterior(&self, theta: &DMatrix<f64>, y: &[f64], prior: &ChangePointPrior) -> Result<PosteriorTable> {
        let enumerated = prior.enumerate_configs()?;
        let configs: Vec<ChangePointVector> = enumerated.iter().map(|(c, _)| c.clone()).collect();
        self.prepare(&configs)?;
        let log_lik = configs.par_iter().map(|c| self.loglik(theta, y, c)).collect::<Result<Vec<_>>>()?;
        let log_prior = enumerated.iter().map(|(_, w)| w.ln()).collect();
        PosteriorTable::from_parts(configs, log_prior, log_lik)
    }
}
