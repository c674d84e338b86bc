//! Signal and change-point priors, and the posterior-mean signal denoiser.

mod changepoint;

pub use changepoint::{default_grid_stride, ChangePointPrior, MAX_CONFIGS};

use crate::error::{invalid, CpampError, Result};
use crate::linalg::{check_psd, matrix_from_rows, SymFactor};
use crate::model::{ModelKind, SignalMatrix};
use crate::rng::{correlated_normal, rng_from_seed};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Law of one row of the signal matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SignalPrior {
    GaussianRows { cov: Vec<Vec<f64>> },
    /// Row is zero with probability 1 - alpha, else N(0, cov).
    BernoulliGaussian { alpha: f64, cov: Vec<Vec<f64>> },
    DiscreteRows { atoms: Vec<Vec<f64>>, weights: Vec<f64> },
    /// Column 1 ~ N(0, kappa2); each later column copies its predecessor with
    /// probability 1 - alpha, otherwise becomes nu (previous + w), w ~ N(0, sigma_w2),
    /// nu = sqrt(kappa2 / (kappa2 + sigma_w2)).
    SparseDifference { kappa2: f64, sigma_w2: f64, alpha: f64 },
}

/// Everything the algorithm assumes about the data-generating process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub signal: SignalPrior,
    pub changepoint: ChangePointPrior,
}

impl PriorSpec {
    pub fn l(&self) -> usize {
        self.changepoint.l
    }
}

/// Zero-mean or shifted Gaussian component of a row law.
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Every supported row law is a finite Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    pub components: Vec<MixtureComponent>,
}

impl GaussianMixture {
    pub fn dim(&self) -> usize {
        self.components[0].mean.len()
    }

    pub fn second_moment(&self) -> DMatrix<f64> {
        let d = self.dim();
        self.components.iter().fold(DMatrix::zeros(d, d), |acc, c| {
            acc + (&c.cov + &c.mean * c.mean.transpose()) * c.weight
        })
    }

    pub fn sampler(&self) -> MixtureSampler {
        let mut cum = Vec::with_capacity(self.components.len());
        let mut acc = 0.0;
        for c in &self.components {
            acc += c.weight;
            cum.push(acc);
        }
        MixtureSampler {
            cum,
            means: self.components.iter().map(|c| c.mean.clone()).collect(),
            roots: self.components.iter().map(|c| SymFactor::new(&c.cov).root).collect(),
        }
    }
}

pub struct MixtureSampler {
    cum: Vec<f64>,
    means: Vec<DVector<f64>>,
    roots: Vec<DMatrix<f64>>,
}

impl MixtureSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random::<f64>() * self.cum.last().copied().unwrap_or(1.0);
        let k = self.cum.iter().position(|&c| u < c).unwrap_or(self.cum.len() - 1);
        &self.means[k] + correlated_normal(rng, &self.roots[k])
    }
}

fn check_cov(cov: &DMatrix<f64>, l: usize) -> Result<()> {
    if cov.nrows() != l || cov.ncols() != l {
        return Err(CpampError::DimensionMismatch(format!(
            "prior covariance is {}x{}, expected {l}x{l}",
            cov.nrows(),
            cov.ncols()
        )));
    }
    if (cov - cov.transpose()).abs().max() > 1e-10 * (1.0 + cov.abs().max()) {
        return invalid("prior covariance must be symmetric");
    }
    check_psd(cov, "prior covariance")
}

impl SignalPrior {
    /// Isotropic Gaussian N(0, scale * I_L).
    pub fn isotropic(l: usize, scale: f64) -> Self {
        SignalPrior::GaussianRows { cov: crate::linalg::matrix_to_rows(&(DMatrix::identity(l, l) * scale)) }
    }

    /// The row law as a Gaussian mixture in dimension L.
    pub fn mixture(&self, l: usize) -> Result<GaussianMixture> {
        let zero = DVector::zeros(l);
        let components = match self {
            SignalPrior::GaussianRows { cov } => {
                let cov = matrix_from_rows(cov)?;
                check_cov(&cov, l)?;
                vec![MixtureComponent { weight: 1.0, mean: zero, cov }]
            }
            SignalPrior::BernoulliGaussian { alpha, cov } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return invalid(format!("alpha must lie in (0, 1], got {alpha}"));
                }
                let cov = matrix_from_rows(cov)?;
                check_cov(&cov, l)?;
                let mut v = vec![MixtureComponent { weight: *alpha, mean: zero.clone(), cov }];
                if *alpha < 1.0 {
                    v.push(MixtureComponent { weight: 1.0 - alpha, mean: zero, cov: DMatrix::zeros(l, l) });
                }
                v
            }
            SignalPrior::DiscreteRows { atoms, weights } => {
                if atoms.is_empty() || atoms.len() != weights.len() {
                    return invalid("discrete prior needs one weight per atom");
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return invalid("discrete prior weights must be nonnegative and sum to 1");
                }
                let mut v = Vec::new();
                for (a, &w) in atoms.iter().zip(weights) {
                    if a.len() != l {
                        return Err(CpampError::DimensionMismatch(format!(
                            "atom of length {}, expected {l}",
                            a.len()
                        )));
                    }
                    if w > 0.0 {
                        v.push(MixtureComponent {
                            weight: w,
                            mean: DVector::from_column_slice(a),
                            cov: DMatrix::zeros(l, l),
                        });
                    }
                }
                v
            }
            SignalPrior::SparseDifference { kappa2, sigma_w2, alpha } => {
                if !(*alpha > 0.0 && *alpha <= 1.0) {
                    return invalid(format!("alpha must lie in (0, 1], got {alpha}"));
                }
                if !(*kappa2 >= 0.0) || !(*sigma_w2 >= 0.0) || kappa2 + sigma_w2 <= 0.0 {
                    return invalid("kappa2 and sigma_w2 must be nonnegative and not both zero");
                }
                sparse_difference_components(l, *kappa2, *sigma_w2, *alpha)
            }
        };
        Ok(GaussianMixture { components })
    }

    /// E[B B^T] for one row.
    pub fn second_moment(&self, l: usize) -> Result<DMatrix<f64>> {
        Ok(self.mixture(l)?.second_moment())
    }

    /// The same prior with every row second moment multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> SignalPrior {
        let scale_rows = |m: &Vec<Vec<f64>>, c: f64| m.iter().map(|r| r.iter().map(|x| x * c).collect()).collect();
        match self {
            SignalPrior::GaussianRows { cov } => SignalPrior::GaussianRows { cov: scale_rows(cov, factor) },
            SignalPrior::BernoulliGaussian { alpha, cov } => {
                SignalPrior::BernoulliGaussian { alpha: *alpha, cov: scale_rows(cov, factor) }
            }
            SignalPrior::DiscreteRows { atoms, weights } => {
                SignalPrior::DiscreteRows { atoms: scale_rows(atoms, factor.sqrt()), weights: weights.clone() }
            }
            SignalPrior::SparseDifference { kappa2, sigma_w2, alpha } => {
                SignalPrior::SparseDifference { kappa2: kappa2 * factor, sigma_w2: sigma_w2 * factor, alpha: *alpha }
            }
        }
    }
}

// One Gaussian per switch pattern s in {0,1}^(L-1): row = T x with
// x = (beta_0, w_1, ..., w_{L-1}) ~ N(0, diag(kappa2, sigma_w2, ...)).
fn sparse_difference_components(l: usize, kappa2: f64, sigma_w2: f64, alpha: f64) -> Vec<MixtureComponent> {
    let nu = (kappa2 / (kappa2 + sigma_w2)).sqrt();
    let mut latent = DMatrix::zeros(l, l);
    latent[(0, 0)] = kappa2;
    for k in 1..l {
        latent[(k, k)] = sigma_w2;
    }
    let mut out = Vec::new();
    for pattern in 0..(1usize << (l - 1)) {
        let mut t = DMatrix::zeros(l, l);
        t[(0, 0)] = 1.0;
        let mut weight = 1.0;
        for k in 1..l {
            let switch = (pattern >> (k - 1)) & 1 == 1;
            let prev = t.row(k - 1).clone_owned();
            if switch {
                weight *= alpha;
                t.set_row(k, &(prev * nu));
                t[(k, k)] += nu;
            } else {
                weight *= 1.0 - alpha;
                t.set_row(k, &prev);
            }
        }
        if weight > 0.0 {
            let cov = &t * &latent * t.transpose();
            out.push(MixtureComponent { weight, mean: DVector::zeros(l), cov });
        }
    }
    out
}

/// Samples a p x L signal matrix with i.i.d. rows from the prior.
pub fn sample_signal_matrix(prior: &SignalPrior, p: usize, l: usize, seed: u64) -> Result<SignalMatrix> {
    let mix = prior.mixture(l)?;
    let sampler = mix.sampler();
    let mut rng = rng_from_seed(seed);
    let mut b = DMatrix::zeros(p, l);
    for j in 0..p {
        let row = sampler.sample(&mut rng);
        b.set_row(j, &row.transpose());
    }
    SignalMatrix::new(b)
}

struct Precomputed {
    log_weight: f64,
    mean: DVector<f64>,
    // M m_k with M = nu_B^T.
    observed_mean: DVector<f64>,
    evidence: SymFactor,
    // S_k M^T (M S_k M^T + kappa)^+.
    gain: DMatrix<f64>,
}

/// Posterior mean of a prior row B given V = nu_B^T B + G, G ~ N(0, kappa_B).
pub struct SignalDenoiser {
    comps: Vec<Precomputed>,
    dim: usize,
}

impl SignalDenoiser {
    pub fn new(prior: &SignalPrior, nu_b: &DMatrix<f64>, kappa_b: &DMatrix<f64>) -> Result<Self> {
        let l = nu_b.nrows();
        if nu_b.ncols() != l || kappa_b.nrows() != l || kappa_b.ncols() != l {
            return Err(CpampError::DimensionMismatch("nu_B and kappa_B must be L x L".into()));
        }
        if !crate::linalg::is_finite(nu_b) || !crate::linalg::is_finite(kappa_b) {
            return invalid("non-finite channel parameters");
        }
        let mix = prior.mixture(l)?;
        let m = nu_b.transpose();
        let comps = mix
            .components
            .iter()
            .map(|c| {
                let obs_cov = &m * &c.cov * m.transpose() + kappa_b;
                let evidence = SymFactor::new(&obs_cov);
                let gain = &c.cov * m.transpose() * &evidence.pinv;
                Precomputed {
                    log_weight: c.weight.ln(),
                    observed_mean: &m * &c.mean,
                    mean: c.mean.clone(),
                    evidence,
                    gain,
                }
            })
            .collect();
        Ok(SignalDenoiser { comps, dim: l })
    }

    fn posterior_parts(&self, v: &[f64]) -> (Vec<f64>, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let vv = DVector::from_column_slice(v);
        let mut logw = Vec::with_capacity(self.comps.len());
        let mut means = Vec::with_capacity(self.comps.len());
        let mut resid = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let r = &vv - &c.observed_mean;
            logw.push(c.log_weight + c.evidence.log_density(r.as_slice()));
            means.push(&c.mean + &c.gain * &r);
            resid.push(r);
        }
        crate::special::softmax_in_place(&mut logw);
        (logw, means, resid)
    }

    pub fn denoise(&self, v: &[f64]) -> Vec<f64> {
        let (w, means, _) = self.posterior_parts(v);
        let mut out = DVector::zeros(self.dim);
        for (wk, mk) in w.iter().zip(&means) {
            out += mk * *wk;
        }
        out.iter().cloned().collect()
    }

    /// Jacobian d f / d v of the posterior mean.
    pub fn jacobian(&self, v: &[f64]) -> DMatrix<f64> {
        let (w, means, resid) = self.posterior_parts(v);
        let l = self.dim;
        // d log w_k / dv = -P_k r_k.
        let grads: Vec<DVector<f64>> = self.comps.iter().zip(&resid).map(|(c, r)| -(&c.evidence.pinv * r)).collect();
        let mut gbar = DVector::zeros(l);
        for (wk, g) in w.iter().zip(&grads) {
            gbar += g * *wk;
        }
        let mut j = DMatrix::zeros(l, l);
        for k in 0..self.comps.len() {
            j += &self.comps[k].gain * w[k];
            j += &means[k] * (&grads[k] - &gbar).transpose() * w[k];
        }
        j
    }
}

fn check_rows(rows: &DMatrix<f64>, l: usize) -> Result<()> {
    if rows.ncols() != l {
        return Err(CpampError::DimensionMismatch(format!("rows have {} columns, expected {l}", rows.ncols())));
    }
    if !crate::linalg::is_finite(rows) {
        return invalid("non-finite input rows");
    }
    Ok(())
}

/// Applies the posterior-mean denoiser to every row of `rows`.
pub fn f_star(rows: &DMatrix<f64>, nu_b: &DMatrix<f64>, kappa_b: &DMatrix<f64>, prior: &SignalPrior) -> Result<DMatrix<f64>> {
    let den = SignalDenoiser::new(prior, nu_b, kappa_b)?;
    check_rows(rows, nu_b.nrows())?;
    let mut out = DMatrix::zeros(rows.nrows(), rows.ncols());
    for j in 0..rows.nrows() {
        let v: Vec<f64> = rows.row(j).iter().cloned().collect();
        let f = den.denoise(&v);
        for (k, x) in f.into_iter().enumerate() {
            out[(j, k)] = x;
        }
    }
    Ok(out)
}

/// Jacobian of the posterior-mean denoiser at one row.
pub fn f_star_jacobian(row: &[f64], nu_b: &DMatrix<f64>, kappa_b: &DMatrix<f64>, prior: &SignalPrior) -> Result<DMatrix<f64>> {
    let den = SignalDenoiser::new(prior, nu_b, kappa_b)?;
    if row.len() != nu_b.nrows() || row.iter().any(|x| !x.is_finite()) {
        return invalid("row must be finite with L entries");
    }
    Ok(den.jacobian(row))
}

/// Convenience used by callers that only know the model's noise law.
pub fn noise_variance(model: &ModelKind) -> f64 {
    model.noise_sd().map_or(0.0, |s| s * s)
}
