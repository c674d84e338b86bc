//! State evolution: the deterministic L x L recursion that tracks the AMP
//! iterates, estimated by Monte Carlo.
//!
//! Two variants share one engine. The ensemble recursion averages over the
//! change-point prior and parametrizes the denoisers f*, g*. The oracle
//! recursion fixes the true configuration and predicts what AMP, run with
//! those same denoisers, actually does on data generated from it.
//!
//! The row index i enters the g-side expectations only through the prior
//! marginal pi_i and, for the oracle, the true label. Rows are grouped into
//! strata with a common marginal, so the average over i becomes a weighted
//! sum over strata.

use crate::denoise::ThetaChannel;
use crate::error::{invalid, CpampError, Result};
use crate::linalg::{check_psd, nested, psd_root, symmetrize, SymFactor};
use crate::model::{eta_to_psi, ChangePointVector, ModelKind};
use crate::priors::{GaussianMixture, PriorSpec, SignalDenoiser, SignalPrior};
use crate::rng::{correlated_normal, derive_seed, rng_from_seed};
use crate::special::{sigmoid, sigmoid_prime};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default Monte Carlo sample count.
pub const DEFAULT_MC_SAMPLES: usize = 1000;
/// Default cap on the number of row strata.
pub const DEFAULT_MAX_STRATA: usize = 64;
const MIN_MC_SAMPLES: usize = 10;

/// State-evolution matrices at iteration t.
///
/// `nu_theta`, `kappa_theta` describe Theta^t; `nu_b`, `kappa_b` describe B^t
/// (zero at t = 0, where they are undefined).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeParams {
    #[serde(with = "nested")]
    pub rho: DMatrix<f64>,
    #[serde(with = "nested")]
    pub nu_theta: DMatrix<f64>,
    #[serde(with = "nested")]
    pub kappa_theta: DMatrix<f64>,
    #[serde(with = "nested")]
    pub nu_b: DMatrix<f64>,
    #[serde(with = "nested")]
    pub kappa_b: DMatrix<f64>,
    /// Monte Carlo estimate of E|f^t(V_B^t) - B|^2 for one signal row.
    pub mse: f64,
    pub t: usize,
}

impl SeParams {
    pub fn l(&self) -> usize {
        self.rho.nrows()
    }

    /// Covariance of one row of V_Theta: nu^T rho^+ nu + kappa.
    pub fn v_theta_cov(&self) -> DMatrix<f64> {
        let rho_inv = SymFactor::new(&self.rho).pinv;
        symmetrize(&(self.nu_theta.transpose() * rho_inv * &self.nu_theta + &self.kappa_theta))
    }
}

/// Monte Carlo estimate of a matrix identity gap with entrywise standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapStat {
    #[serde(with = "nested")]
    pub gap: DMatrix<f64>,
    #[serde(with = "nested")]
    pub se: DMatrix<f64>,
}

impl GapStat {
    fn from_samples(samples: &[DMatrix<f64>]) -> Self {
        let m = samples.len() as f64;
        let (r, c) = samples[0].shape();
        let mean = samples.iter().fold(DMatrix::zeros(r, c), |a, d| a + d) / m;
        let var = samples.iter().fold(DMatrix::zeros(r, c), |a, d| {
            let e = d - &mean;
            a + e.component_mul(&e)
        }) / (m - 1.0).max(1.0);
        GapStat { se: var.map(|v| (v / m).sqrt()), gap: mean }
    }

    /// Largest |gap| / se over entries (entries with zero se and zero gap are skipped).
    pub fn max_z(&self) -> f64 {
        self.gap.iter().zip(self.se.iter()).fold(0.0, |acc, (g, s)| {
            if *g == 0.0 {
                acc
            } else if *s == 0.0 {
                f64::INFINITY
            } else {
                acc.max(g.abs() / s)
            }
        })
    }

    /// Whether every entry is within `k` standard errors of zero (plus a 1e-12 floor).
    pub fn within(&self, k: f64) -> bool {
        self.gap.iter().zip(self.se.iter()).all(|(g, s)| g.abs() <= k * s + 1e-12)
    }
}

/// Monte Carlo diagnostics of one recursion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// nu_B - kappa_B (zero in expectation when g = g*).
    pub nu_b_minus_kappa_b: GapStat,
    /// kappa_Theta - nu_Theta + nu_Theta^T rho^-1 nu_Theta (zero in expectation when f = f*).
    pub kappa_theta_identity: GapStat,
    /// Condition number of cov(Z | V) for the g* channel used in the step.
    pub g_condition: f64,
}

/// Sequence of state-evolution iterates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeTrajectory {
    pub params: Vec<SeParams>,
    pub stats: Vec<StepStats>,
    pub mc_samples: usize,
    pub seed: u64,
}

impl SeTrajectory {
    pub fn last(&self) -> &SeParams {
        self.params.last().expect("trajectory is never empty")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeConfig {
    pub mc_samples: usize,
    pub max_strata: usize,
    pub seed: u64,
}

impl Default for SeConfig {
    fn default() -> Self {
        SeConfig { mc_samples: DEFAULT_MC_SAMPLES, max_strata: DEFAULT_MAX_STRATA, seed: 0 }
    }
}

/// A block of rows sharing the denoiser marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    /// Fraction of the n rows in the block.
    pub weight: f64,
    /// Label marginal fed to g*.
    pub marginal: Vec<f64>,
    /// Law of the label that generates the response.
    pub label_law: Vec<f64>,
}

/// Groups rows into strata. With `truth`, the generating label is the true
/// one; otherwise it is drawn from the marginal.
pub fn build_strata(marginals: &DMatrix<f64>, truth: Option<&[usize]>, max_strata: usize) -> Result<Vec<Stratum>> {
    let (n, l) = marginals.shape();
    if n == 0 || max_strata == 0 {
        return invalid("strata need n > 0 and max_strata > 0");
    }
    if truth.is_some_and(|t| t.len() != n) {
        return Err(CpampError::DimensionMismatch("truth labels must have length n".into()));
    }
    let key_changes = |i: usize| -> bool {
        truth.is_some_and(|t| t[i] != t[i - 1]) || (0..l).any(|k| marginals[(i, k)] != marginals[(i - 1, k)])
    };
    let mut cuts: Vec<usize> = std::iter::once(0).chain((1..n).filter(|&i| key_changes(i))).chain(std::iter::once(n)).collect();
    if cuts.len() - 1 > max_strata {
        cuts = (0..=max_strata).map(|k| (k * n + max_strata / 2) / max_strata).collect();
        if let Some(t) = truth {
            cuts.extend((1..n).filter(|&i| t[i] != t[i - 1]));
        }
        cuts.sort_unstable();
        cuts.dedup();
    }
    Ok(cuts
        .windows(2)
        .map(|w| {
            let (a, b) = (w[0], w[1]);
            let len = (b - a) as f64;
            let marginal: Vec<f64> = (0..l).map(|k| (a..b).map(|i| marginals[(i, k)]).sum::<f64>() / len).collect();
            let label_law = match truth {
                Some(t) => (0..l).map(|k| if t[a] == k { 1.0 } else { 0.0 }).collect(),
                None => marginal.clone(),
            };
            Stratum { weight: len / n as f64, marginal, label_law }
        })
        .collect())
}

/// Analytic initialization: nu_Theta = 0, kappa_Theta = rho = E[B B^T] / delta.
pub fn se_init(signal: &SignalPrior, l: usize, delta: f64) -> Result<SeParams> {
    if !(delta > 0.0 && delta.is_finite()) {
        return invalid(format!("delta must be positive, got {delta}"));
    }
    let rho = symmetrize(&(signal.second_moment(l)? / delta));
    // B_hat^0 is an independent prior draw.
    let rho_trace = rho.trace();
    Ok(SeParams {
        kappa_theta: rho.clone(),
        rho,
        nu_theta: DMatrix::zeros(l, l),
        nu_b: DMatrix::zeros(l, l),
        kappa_b: DMatrix::zeros(l, l),
        mse: 2.0 * delta * rho_trace,
        t: 0,
    })
}

/// Monte Carlo state evolution for a fixed prior, model and aspect ratio delta = n / p.
pub struct StateEvolution {
    pub signal: SignalPrior,
    pub model: ModelKind,
    pub delta: f64,
    pub config: SeConfig,
    marginals: DMatrix<f64>,
    mixture: GaussianMixture,
    ensemble_strata: Vec<Stratum>,
    rho: DMatrix<f64>,
    rho_pinv: DMatrix<f64>,
    rho_root: DMatrix<f64>,
}

struct FSide {
    nu_theta: DMatrix<f64>,
    kappa_theta: DMatrix<f64>,
    mse: f64,
    gap: GapStat,
}

// Output of one Monte Carlo pass over the g side.
struct GSide {
    nu_b: DMatrix<f64>,
    kappa_b: DMatrix<f64>,
    gap: GapStat,
}

impl StateEvolution {
    pub fn new(prior: &PriorSpec, model: ModelKind, delta: f64, config: SeConfig) -> Result<Self> {
        model.validate()?;
        if config.mc_samples < MIN_MC_SAMPLES {
            return invalid(format!("mc_samples must be at least {MIN_MC_SAMPLES}, got {}", config.mc_samples));
        }
        let l = prior.l();
        let marginals = prior.changepoint.marginals();
        let init = se_init(&prior.signal, l, delta)?;
        let factor = SymFactor::new(&init.rho);
        Ok(StateEvolution {
            signal: prior.signal.clone(),
            model,
            delta,
            config,
            ensemble_strata: build_strata(&marginals, None, config.max_strata)?,
            mixture: prior.signal.mixture(l)?,
            marginals,
            rho_pinv: factor.pinv,
            rho_root: factor.root,
            rho: init.rho,
        })
    }

    pub fn l(&self) -> usize {
        self.rho.nrows()
    }

    pub fn n(&self) -> usize {
        self.marginals.nrows()
    }

    pub fn marginals(&self) -> &DMatrix<f64> {
        &self.marginals
    }

    pub fn ensemble_strata(&self) -> &[Stratum] {
        &self.ensemble_strata
    }

    pub fn init(&self) -> SeParams {
        let l = self.l();
        SeParams {
            rho: self.rho.clone(),
            nu_theta: DMatrix::zeros(l, l),
            kappa_theta: self.rho.clone(),
            nu_b: DMatrix::zeros(l, l),
            kappa_b: DMatrix::zeros(l, l),
            mse: 2.0 * self.delta * self.rho.trace(),
            t: 0,
        }
    }

    /// Strata for the oracle recursion under true change points `truth`.
    pub fn oracle_strata(&self, truth: &ChangePointVector) -> Result<Vec<Stratum>> {
        if truth.n != self.n() {
            return Err(CpampError::DimensionMismatch(format!("truth has n = {}, prior has n = {}", truth.n, self.n())));
        }
        let psi = eta_to_psi(truth, self.n(), self.l())?;
        let labels: Vec<usize> = psi.psi.iter().map(|&p| p - 1).collect();
        build_strata(&self.marginals, Some(&labels), self.config.max_strata)
    }

    /// g* channel for SE parameters whose Theta side is `params`.
    pub fn channel(&self, params: &SeParams) -> Result<ThetaChannel> {
        ThetaChannel::new(&self.rho, &params.nu_theta, &params.kappa_theta, self.model)
    }

    /// f* for SE parameters whose B side is `params`.
    pub fn signal_denoiser(&self, params: &SeParams) -> Result<SignalDenoiser> {
        SignalDenoiser::new(&self.signal, &params.nu_b, &params.kappa_b)
    }

    // E over (Z, V_Theta, eps) and strata of the Jacobian route dg/dZ and of g g^T,
    // with V drawn from `law` and g* built on `channel`.
    fn g_side(&self, law: &SeParams, channel: &ThetaChannel, strata: &[Stratum], seed: u64) -> Result<GSide> {
        let l = self.l();
        let m = self.config.mc_samples;
        let g_root = psd_root(&law.kappa_theta);
        let a = law.nu_theta.transpose() * &self.rho_pinv;
        let mut rng = rng_from_seed(seed);
        let draws: Vec<(DVector<f64>, Vec<f64>, f64)> = (0..m)
            .map(|_| {
                let z = correlated_normal(&mut rng, &self.rho_root);
                let g = correlated_normal(&mut rng, &g_root);
                let v = (&a * &z + g).iter().cloned().collect();
                let eps = self.model.sample_noise(&mut rng);
                (z, v, eps)
            })
            .collect();
        let model = self.model;
        let per_sample: Vec<(DMatrix<f64>, DMatrix<f64>)> = draws
            .par_iter()
            .map(|(z, v, eps)| {
                let mut nu = DMatrix::zeros(l, l);
                let mut kap = DMatrix::zeros(l, l);
                for s in strata {
                    let labels = (0..l).filter(|&k| s.label_law[k] > 0.0);
                    if let ModelKind::Logistic = model {
                        // eps integrated out: u = 1 with probability sigmoid(Z_l).
                        let g1 = DVector::from_vec(channel.g_star(v, 1.0, &s.marginal));
                        let g0 = DVector::from_vec(channel.g_star(v, 0.0, &s.marginal));
                        let o1 = &g1 * g1.transpose();
                        let o0 = &g0 * g0.transpose();
                        let diff = &g1 - &g0;
                        for k in labels {
                            let w = s.weight * s.label_law[k];
                            let p1 = sigmoid(z[k]);
                            kap += (&o1 * p1 + &o0 * (1.0 - p1)) * w;
                            let mut col = nu.column_mut(k);
                            col += &diff * (w * sigmoid_prime(z[k]));
                        }
                    } else {
                        for k in labels {
                            let w = s.weight * s.label_law[k];
                            let u = model.q(z[k], *eps);
                            let g = DVector::from_vec(channel.g_star(v, u, &s.marginal));
                            kap += &g * g.transpose() * w;
                            let dq = match model {
                                ModelKind::RectifiedLinear { .. } if z[k] < 0.0 => 0.0,
                                _ => 1.0,
                            };
                            if dq > 0.0 {
                                let gu = DVector::from_vec(channel.g_du(v, u, &s.marginal));
                                let mut col = nu.column_mut(k);
                                col += gu * (w * dq);
                            }
                        }
                    }
                }
                (nu, kap)
            })
            .collect();
        let mf = m as f64;
        let nu_b = per_sample.iter().fold(DMatrix::zeros(l, l), |acc, (n, _)| acc + n) / mf;
        let kappa_b = symmetrize(&(per_sample.iter().fold(DMatrix::zeros(l, l), |acc, (_, k)| acc + k) / mf));
        let diffs: Vec<DMatrix<f64>> = per_sample.iter().map(|(n, k)| n - k).collect();
        check_psd(&kappa_b, "kappa_B")?;
        if !crate::linalg::is_finite(&nu_b) {
            return Err(CpampError::Divergence { iteration: law.t, reason: "non-finite nu_B in state evolution".into() });
        }
        Ok(GSide { nu_b, kappa_b, gap: GapStat::from_samples(&diffs) })
    }

    // E over B ~ prior and G_B of the f-side moments, with V_B drawn from
    // (nu_b, kappa_b) and f* given by `denoiser`.
    fn f_side(
        &self,
        nu_b: &DMatrix<f64>,
        kappa_b: &DMatrix<f64>,
        denoiser: &SignalDenoiser,
        seed: u64,
    ) -> Result<FSide> {
        let l = self.l();
        let m = self.config.mc_samples;
        let sampler = self.mixture.sampler();
        let root = psd_root(kappa_b);
        let nu_t = nu_b.transpose();
        let mut rng = rng_from_seed(seed);
        let draws: Vec<(DVector<f64>, Vec<f64>)> = (0..m)
            .map(|_| {
                let b = sampler.sample(&mut rng);
                let g = correlated_normal(&mut rng, &root);
                let v = (&nu_t * &b + g).iter().cloned().collect();
                (b, v)
            })
            .collect();
        let fs: Vec<DVector<f64>> = draws.par_iter().map(|(_, v)| DVector::from_vec(denoiser.denoise(v))).collect();
        let mf = m as f64;
        let d = self.delta;
        let bf: Vec<DMatrix<f64>> = draws.iter().zip(&fs).map(|((b, _), f)| b * f.transpose() / d).collect();
        let nu_theta = bf.iter().fold(DMatrix::zeros(l, l), |a, x| a + x) / mf;
        let proj = nu_theta.transpose() * &self.rho_pinv;
        let centered: Vec<DMatrix<f64>> = draws
            .iter()
            .zip(&fs)
            .map(|((b, _), f)| {
                let e = f - &proj * b;
                &e * e.transpose() / d
            })
            .collect();
        let kappa_theta = symmetrize(&(centered.iter().fold(DMatrix::zeros(l, l), |a, x| a + x) / mf));
        check_psd(&kappa_theta, "kappa_Theta")?;
        let quad = nu_theta.transpose() * &self.rho_pinv * &nu_theta;
        let diffs: Vec<DMatrix<f64>> = centered.iter().zip(&bf).map(|(c, x)| c - x + &quad).collect();
        let mse = draws.iter().zip(&fs).map(|((b, _), f)| (f - b).norm_squared()).sum::<f64>() / mf;
        Ok(FSide { nu_theta, kappa_theta, mse, gap: GapStat::from_samples(&diffs) })
    }

    fn step_seeds(&self, t: usize) -> (u64, u64) {
        (derive_seed(self.config.seed, &[t as u64, 0]), derive_seed(self.config.seed, &[t as u64, 1]))
    }

    /// One ensemble step t -> t+1.
    pub fn ensemble_step(&self, params: &SeParams) -> Result<(SeParams, StepStats)> {
        let channel = self.channel(params)?;
        let (sg, sf) = self.step_seeds(params.t);
        let gs = self.g_side(params, &channel, &self.ensemble_strata, sg)?;
        let denoiser = SignalDenoiser::new(&self.signal, &gs.nu_b, &gs.kappa_b)?;
        let fs = self.f_side(&gs.nu_b, &gs.kappa_b, &denoiser, sf)?;
        let next = SeParams {
            rho: self.rho.clone(),
            nu_theta: fs.nu_theta,
            kappa_theta: fs.kappa_theta,
            nu_b: gs.nu_b,
            kappa_b: gs.kappa_b,
            mse: fs.mse,
            t: params.t + 1,
        };
        Ok((next, StepStats { nu_b_minus_kappa_b: gs.gap, kappa_theta_identity: fs.gap, g_condition: channel.condition_number() }))
    }

    /// One oracle step t -> t+1. The denoisers are the ensemble ones at the
    /// same iteration (`ensemble_t` feeds g*, `ensemble_next` feeds f*).
    pub fn oracle_step(
        &self,
        params: &SeParams,
        ensemble_t: &SeParams,
        ensemble_next: &SeParams,
        strata: &[Stratum],
    ) -> Result<(SeParams, StepStats)> {
        if ensemble_t.t != params.t || ensemble_next.t != params.t + 1 {
            return invalid("oracle and ensemble iterations are out of step");
        }
        let channel = self.channel(ensemble_t)?;
        let (sg, sf) = self.step_seeds(params.t);
        let gs = self.g_side(params, &channel, strata, sg)?;
        let denoiser = self.signal_denoiser(ensemble_next)?;
        let fs = self.f_side(&gs.nu_b, &gs.kappa_b, &denoiser, sf)?;
        let next = SeParams {
            rho: self.rho.clone(),
            nu_theta: fs.nu_theta,
            kappa_theta: fs.kappa_theta,
            nu_b: gs.nu_b,
            kappa_b: gs.kappa_b,
            mse: fs.mse,
            t: params.t + 1,
        };
        Ok((next, StepStats { nu_b_minus_kappa_b: gs.gap, kappa_theta_identity: fs.gap, g_condition: channel.condition_number() }))
    }

    /// Ensemble trajectory with `iterations` steps (iterations + 1 parameter sets).
    pub fn run_ensemble(&self, iterations: usize) -> Result<SeTrajectory> {
        let mut params = vec![self.init()];
        let mut stats = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (next, st) = self.ensemble_step(params.last().unwrap())?;
            params.push(next);
            stats.push(st);
        }
        Ok(SeTrajectory { params, stats, mc_samples: self.config.mc_samples, seed: self.config.seed })
    }

    /// Oracle trajectory for true change points `truth`, as long as `ensemble`.
    pub fn run_oracle(&self, ensemble: &SeTrajectory, truth: &ChangePointVector) -> Result<SeTrajectory> {
        let strata = self.oracle_strata(truth)?;
        let mut params = vec![self.init()];
        let mut stats = Vec::new();
        for t in 0..ensemble.params.len() - 1 {
            let (next, st) = self.oracle_step(&params[t], &ensemble.params[t], &ensemble.params[t + 1], &strata)?;
            params.push(next);
            stats.push(st);
        }
        Ok(SeTrajectory { params, stats, mc_samples: self.config.mc_samples, seed: self.config.seed })
    }
}

/// Draws from the limiting laws of the AMP iterates.
#[derive(Debug, Clone)]
pub struct LimitSample {
    /// n x L, rows V_Theta = rho^-1-projected Z plus noise.
    pub v_theta: DMatrix<f64>,
    /// n x L, rows N(0, rho).
    pub z: DMatrix<f64>,
    /// Responses q(Z_{i, psi_i}, eps_i) with fresh noise.
    pub y: Vec<f64>,
    /// p x L, rows nu_B^T B_j + G_B.
    pub v_b: DMatrix<f64>,
}

/// Samples (V_Theta, Z, y, V_B) with V_Theta = Z rho^+ nu_Theta + G_Theta and
/// V_B = B nu_B + G_B. `psi` holds 1-based labels.
pub fn sample_limit_iterates(params: &SeParams, b: &DMatrix<f64>, psi: &[usize], model: ModelKind, seed: u64) -> Result<LimitSample> {
    let l = params.l();
    let n = psi.len();
    if b.ncols() != l {
        return Err(CpampError::DimensionMismatch(format!("B has {} columns, expected {l}", b.ncols())));
    }
    if psi.iter().any(|&k| k == 0 || k > l) {
        return invalid("labels must lie in 1..=L");
    }
    for (m, what) in [(&params.rho, "rho"), (&params.kappa_theta, "kappa_Theta"), (&params.kappa_b, "kappa_B")] {
        check_psd(m, what)?;
    }
    let rho = SymFactor::new(&params.rho);
    let a = params.nu_theta.transpose() * &rho.pinv;
    let g_root = psd_root(&params.kappa_theta);
    let gb_root = psd_root(&params.kappa_b);
    let mut rng = rng_from_seed(derive_seed(seed, &[0]));
    let mut z = DMatrix::zeros(n, l);
    let mut v_theta = DMatrix::zeros(n, l);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let zi = correlated_normal(&mut rng, &rho.root);
        let vi = &a * &zi + correlated_normal(&mut rng, &g_root);
        let eps = model.sample_noise(&mut rng);
        y.push(model.q(zi[psi[i] - 1], eps));
        z.set_row(i, &zi.transpose());
        v_theta.set_row(i, &vi.transpose());
    }
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let mut v_b = b * &params.nu_b;
    for j in 0..b.nrows() {
        let g = correlated_normal(&mut rng, &gb_root);
        let mut row = v_b.row_mut(j);
        row += g.transpose();
    }
    Ok(LimitSample { v_theta, z, y, v_b })
}
