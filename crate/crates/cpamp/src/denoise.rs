//! Bayes-optimal response-side denoiser g* for the linear, logistic and
//! rectified-linear channels, the per-row likelihoods it is built from, and
//! its Jacobians.
//!
//! Conditional on V, the latent row Z is N(mu(V), C) with mu(V) = nu Sigma_V^+ V
//! and C = rho - nu Sigma_V^+ nu^T. Given the label l, the response u depends on
//! Z only through Z_l, so E[Z | V, u] mixes one-dimensional updates along the
//! columns of C. Each (label, branch) pair contributes a log-likelihood and a
//! score (E[Z_l | V, u, branch] - mu_l) / sigma_l^2; then
//! g*(V, u) = C^+ C sum_j w_j e_{l_j} score_j.

use crate::error::{invalid, CpampError, Result};
use crate::linalg::{fd_jacobian, fd_step, symmetrize, SymFactor};
use crate::model::ModelKind;
use crate::special::{log_norm_cdf, log_normal_density, mills, softmax_in_place, PROBIT_GAMMA};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Floor applied to conditional variances before division.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Numerical constants shared by the denoisers.
#[derive(Debug, Clone, Copy)]
pub struct Tolerances {
    pub fd_rel_step: f64,
    pub sigma2_floor: f64,
    pub eig_floor_rel: f64,
}

pub const TOLERANCES: Tolerances = Tolerances {
    fd_rel_step: 1e-5,
    sigma2_floor: SIGMA2_FLOOR,
    eig_floor_rel: crate::linalg::EIG_FLOOR_REL,
};

/// Result of conditioning a joint Gaussian on a block of coordinates.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Conditions N(joint_mean, joint_cov) on coordinates `observed` taking `values`.
pub fn gaussian_condition(
    joint_mean: &DVector<f64>,
    joint_cov: &DMatrix<f64>,
    observed: &[usize],
    values: &[f64],
) -> Result<GaussianConditional> {
    let d = joint_mean.len();
    if joint_cov.nrows() != d || joint_cov.ncols() != d || observed.len() != values.len() {
        return Err(CpampError::DimensionMismatch("joint mean/cov/observation sizes disagree".into()));
    }
    if observed.iter().any(|&k| k >= d) {
        return invalid("observed index out of range");
    }
    let free: Vec<usize> = (0..d).filter(|k| !observed.contains(k)).collect();
    let sub = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |i, j| joint_cov[(rows[i], cols[j])]);
    let s_xx = sub(&free, &free);
    let s_xy = sub(&free, observed);
    let s_yy = sub(observed, observed);
    let s_yy_inv = SymFactor::new(&s_yy).pinv;
    let resid = DVector::from_fn(observed.len(), |k, _| values[k] - joint_mean[observed[k]]);
    let mu_x = DVector::from_fn(free.len(), |k, _| joint_mean[free[k]]);
    let gain = &s_xy * &s_yy_inv;
    Ok(GaussianConditional {
        mean: mu_x + &gain * resid,
        cov: symmetrize(&(s_xx - &gain * s_xy.transpose())),
    })
}

/// Moments of Z given V for one row.
#[derive(Debug, Clone)]
pub struct ConditionalMoments {
    pub mean_given_v: DVector<f64>,
    pub cov_given_v: DMatrix<f64>,
    /// Floored conditional standard deviations sigma_l.
    pub sigma: Vec<f64>,
}

impl ConditionalMoments {
    /// (mu_{k|l}, sigma_{k|l}) of Z_k given V and Z_l = z_l.
    pub fn pair(&self, k: usize, l: usize, z_l: f64) -> (f64, f64) {
        let s2 = self.sigma[l] * self.sigma[l];
        let lam = self.cov_given_v[(k, l)];
        let mu = self.mean_given_v[k] + lam / s2 * (z_l - self.mean_given_v[l]);
        let var = (self.cov_given_v[(k, k)] - lam * lam / s2).max(0.0);
        (mu, var.sqrt())
    }
}

/// Auxiliary quantities of the rectified-linear branch Omega = 1{Z_l >= 0}.
#[derive(Debug, Clone, Copy)]
pub struct ReluAux {
    pub omega: bool,
    pub mu_star: f64,
    pub sigma_star2: f64,
}

/// Moments of Z_l given (V, u, Omega = 1) for the rectified-linear channel.
pub fn relu_aux(u: f64, mu_l: f64, sigma2_l: f64, noise_var: f64) -> ReluAux {
    let s = sigma2_l + noise_var;
    ReluAux {
        omega: true,
        mu_star: (u * sigma2_l + mu_l * noise_var) / s,
        sigma_star2: sigma2_l * noise_var / s,
    }
}

/// The Gaussian channel (rho, nu_Theta, kappa_Theta) feeding g*.
#[derive(Debug, Clone)]
pub struct ThetaChannel {
    pub rho: DMatrix<f64>,
    pub nu_theta: DMatrix<f64>,
    pub kappa_theta: DMatrix<f64>,
    pub sigma_v: DMatrix<f64>,
    pub model: ModelKind,
    sigma_v_fac: SymFactor,
    // E[Z | V] = gain_v V.
    gain_v: DMatrix<f64>,
    cond_cov: DMatrix<f64>,
    // C^+ C.
    proj: DMatrix<f64>,
    sig2: Vec<f64>,
    cond_number: f64,
    noise_var: f64,
}

// One (label, branch) term of the mixture.
#[derive(Clone, Copy)]
struct Term {
    log_lik: f64,
    score: f64,
}

impl ThetaChannel {
    pub fn new(rho: &DMatrix<f64>, nu_theta: &DMatrix<f64>, kappa_theta: &DMatrix<f64>, model: ModelKind) -> Result<Self> {
        model.validate()?;
        let l = rho.nrows();
        for m in [rho, nu_theta, kappa_theta] {
            if m.nrows() != l || m.ncols() != l {
                return Err(CpampError::DimensionMismatch("channel matrices must be L x L".into()));
            }
            if !crate::linalg::is_finite(m) {
                return invalid("non-finite channel matrix");
            }
        }
        if let ModelKind::RectifiedLinear { noise_sd } = model {
            if noise_sd <= 0.0 {
                return invalid("rectified-linear denoiser needs noise_sd > 0");
            }
        }
        let rho_inv = SymFactor::new(rho).pinv;
        let sigma_v = symmetrize(&(nu_theta.transpose() * &rho_inv * nu_theta + kappa_theta));
        let sigma_v_fac = SymFactor::new(&sigma_v);
        let gain_v = nu_theta * &sigma_v_fac.pinv;
        let cond_cov = symmetrize(&(rho - &gain_v * nu_theta.transpose()));
        let cond_fac = SymFactor::new(&cond_cov);
        let proj = &cond_fac.pinv * &cond_cov;
        let sig2 = (0..l).map(|k| cond_cov[(k, k)].max(SIGMA2_FLOOR)).collect();
        let noise_var = model.noise_sd().map_or(0.0, |s| s * s);
        Ok(ThetaChannel {
            rho: rho.clone(),
            nu_theta: nu_theta.clone(),
            kappa_theta: kappa_theta.clone(),
            sigma_v,
            model,
            sigma_v_fac,
            gain_v,
            cond_number: cond_fac.condition_number(),
            cond_cov,
            proj,
            sig2,
            noise_var,
        })
    }

    pub fn l(&self) -> usize {
        self.rho.nrows()
    }

    /// Condition number of cov(Z | V).
    pub fn condition_number(&self) -> f64 {
        self.cond_number
    }

    pub fn cov_given_v(&self) -> &DMatrix<f64> {
        &self.cond_cov
    }

    pub fn mean_given_v(&self, v: &[f64]) -> DVector<f64> {
        &self.gain_v * DVector::from_column_slice(v)
    }

    pub fn moments(&self, v: &[f64]) -> ConditionalMoments {
        ConditionalMoments {
            mean_given_v: self.mean_given_v(v),
            cov_given_v: self.cond_cov.clone(),
            sigma: self.sig2.iter().map(|s| s.sqrt()).collect(),
        }
    }

    fn mean_into(&self, v: &[f64], mu: &mut [f64]) {
        let l = self.l();
        for (a, m) in mu.iter_mut().enumerate() {
            let mut acc = 0.0;
            for b in 0..l {
                acc += self.gain_v[(a, b)] * v[b];
            }
            *m = acc;
        }
    }

    // Terms for label l; returns how many of `out` were filled.
    fn terms(&self, mu_l: f64, sig2_l: f64, u: f64, out: &mut [Term; 2]) -> usize {
        let s2 = self.noise_var;
        match self.model {
            ModelKind::Linear { .. } => {
                let s = sig2_l + s2;
                out[0] = Term { log_lik: log_normal_density(u, mu_l, s), score: (u - mu_l) / s };
                1
            }
            ModelKind::Logistic => {
                let sign = if u > 0.5 { 1.0 } else { -1.0 };
                let tau = PROBIT_GAMMA / (1.0 + PROBIT_GAMMA * PROBIT_GAMMA * sig2_l).sqrt();
                let x = sign * tau * mu_l;
                out[0] = Term { log_lik: log_norm_cdf(x), score: sign * tau * mills(x) };
                1
            }
            ModelKind::RectifiedLinear { .. } => {
                let sd_l = sig2_l.sqrt();
                out[0] = Term {
                    log_lik: log_norm_cdf(-mu_l / sd_l) + log_normal_density(u, 0.0, s2),
                    score: -mills(-mu_l / sd_l) / sd_l,
                };
                let aux = relu_aux(u, mu_l, sig2_l, s2);
                let sd_star = aux.sigma_star2.sqrt();
                let s = sig2_l + s2;
                out[1] = Term {
                    log_lik: log_normal_density(u, mu_l, s) + log_norm_cdf(aux.mu_star / sd_star),
                    score: (u - mu_l) / s + sd_star / sig2_l * mills(aux.mu_star / sd_star),
                };
                2
            }
        }
    }

    /// g*(v, u) for a row whose label has prior marginal `marginal`.
    pub fn g_star(&self, v: &[f64], u: f64, marginal: &[f64]) -> Vec<f64> {
        self.g_star_flagged(v, u, marginal).0
    }

    /// As [`ThetaChannel::g_star`]; the flag is set when every mixture term underflowed.
    pub fn g_star_flagged(&self, v: &[f64], u: f64, marginal: &[f64]) -> (Vec<f64>, bool) {
        let l = self.l();
        let mut mu = vec![0.0; l];
        self.mean_into(v, &mut mu);
        let mut logw = [0.0; 16];
        let mut labels = [0usize; 16];
        let mut scores = [0.0; 16];
        let mut m = 0;
        let mut buf = [Term { log_lik: 0.0, score: 0.0 }; 2];
        for lab in 0..l {
            let pi = marginal[lab];
            if pi <= 0.0 {
                continue;
            }
            let k = self.terms(mu[lab], self.sig2[lab], u, &mut buf);
            for t in &buf[..k] {
                logw[m] = pi.ln() + t.log_lik;
                labels[m] = lab;
                scores[m] = t.score;
                m += 1;
            }
        }
        let lse = softmax_in_place(&mut logw[..m]);
        if !lse.is_finite() {
            return (vec![0.0; l], true);
        }
        let mut acc = vec![0.0; l];
        for j in 0..m {
            acc[labels[j]] += logw[j] * scores[j];
        }
        let mut out = vec![0.0; l];
        for (a, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for b in 0..l {
                s += self.proj[(a, b)] * acc[b];
            }
            *o = s;
        }
        (out, false)
    }

    /// log N(v; 0, Sigma_V).
    pub fn log_density_v(&self, v: &[f64]) -> f64 {
        self.sigma_v_fac.log_density(v)
    }

    /// log p(u | V = v, label) for every label (probit form for the logistic channel).
    pub fn log_lik_u_all(&self, v: &[f64], u: f64) -> Vec<f64> {
        let l = self.l();
        let mut mu = vec![0.0; l];
        self.mean_into(v, &mut mu);
        let mut buf = [Term { log_lik: 0.0, score: 0.0 }; 2];
        (0..l)
            .map(|lab| {
                let k = self.terms(mu[lab], self.sig2[lab], u, &mut buf);
                if k == 1 {
                    buf[0].log_lik
                } else {
                    crate::special::log_sum_exp(&[buf[0].log_lik, buf[1].log_lik])
                }
            })
            .collect()
    }

    /// Joint log density of (V, u) under each label.
    pub fn log_lik_row(&self, v: &[f64], u: f64) -> Vec<f64> {
        let base = self.log_density_v(v);
        self.log_lik_u_all(v, u).into_iter().map(|x| x + base).collect()
    }

    /// Central finite-difference Jacobian of g* with respect to v.
    pub fn g_jacobian_fd(&self, v: &[f64], u: f64, marginal: &[f64], h: f64) -> DMatrix<f64> {
        fd_jacobian(|x| self.g_star(x, u, marginal), v, h)
    }

    /// Jacobian of g* with respect to v: analytic for the linear channel,
    /// central differences with step 1e-5 (1 + |v|) otherwise.
    pub fn g_jacobian(&self, v: &[f64], u: f64, marginal: &[f64]) -> DMatrix<f64> {
        match self.model {
            ModelKind::Linear { .. } => self.g_jacobian_linear(v, u, marginal),
            _ => self.g_jacobian_fd(v, u, marginal, fd_step(v)),
        }
    }

    /// Analytic Jacobian of the linear-channel g*.
    pub fn g_jacobian_linear(&self, v: &[f64], u: f64, marginal: &[f64]) -> DMatrix<f64> {
        let l = self.l();
        let mut mu = vec![0.0; l];
        self.mean_into(v, &mut mu);
        let labels: Vec<usize> = (0..l).filter(|&k| marginal[k] > 0.0).collect();
        let s: Vec<f64> = labels.iter().map(|&k| self.sig2[k] + self.noise_var).collect();
        let r: Vec<f64> = labels.iter().zip(&s).map(|(&k, s)| (u - mu[k]) / s).collect();
        let mut w: Vec<f64> = labels
            .iter()
            .zip(&s)
            .map(|(&k, s)| marginal[k].ln() + log_normal_density(u, mu[k], *s))
            .collect();
        softmax_in_place(&mut w);
        // d r_l / dv = -a_l / s_l and d log w_l / dv = r_l a_l with a_l = row l of gain_v.
        let rows: Vec<DVector<f64>> = labels.iter().map(|&k| self.gain_v.row(k).transpose()).collect();
        let mut abar = DVector::zeros(l);
        for j in 0..labels.len() {
            abar += &rows[j] * (w[j] * r[j]);
        }
        let mut inner = DMatrix::zeros(l, l);
        for j in 0..labels.len() {
            let dw = (&rows[j] * r[j] - &abar) * w[j];
            let row = dw * r[j] - &rows[j] * (w[j] / s[j]);
            inner.set_row(labels[j], &(inner.row(labels[j]) + row.transpose()));
        }
        &self.proj * inner
    }

    /// d g* / d u: analytic for the linear channel, central differences with
    /// step 1e-5 (1 + |u|) otherwise.
    pub fn g_du(&self, v: &[f64], u: f64, marginal: &[f64]) -> Vec<f64> {
        if let ModelKind::Linear { .. } = self.model {
            return self.g_du_linear(v, u, marginal);
        }
        self.g_du_fd(v, u, marginal)
    }

    fn g_du_linear(&self, v: &[f64], u: f64, marginal: &[f64]) -> Vec<f64> {
        let l = self.l();
        let mut mu = vec![0.0; l];
        self.mean_into(v, &mut mu);
        let mut w = vec![f64::NEG_INFINITY; l];
        let mut r = vec![0.0; l];
        let mut s = vec![1.0; l];
        for k in 0..l {
            if marginal[k] > 0.0 {
                s[k] = self.sig2[k] + self.noise_var;
                r[k] = (u - mu[k]) / s[k];
                w[k] = marginal[k].ln() + log_normal_density(u, mu[k], s[k]);
            }
        }
        softmax_in_place(&mut w);
        // d log w_k / du = -r_k, so d(w_k r_k)/du = w_k ((rbar - r_k) r_k + 1 / s_k).
        let rbar: f64 = (0..l).filter(|&k| marginal[k] > 0.0).map(|k| w[k] * r[k]).sum();
        let inner: Vec<f64> =
            (0..l).map(|k| if marginal[k] > 0.0 { w[k] * ((rbar - r[k]) * r[k] + 1.0 / s[k]) } else { 0.0 }).collect();
        (0..l).map(|a| (0..l).map(|b| self.proj[(a, b)] * inner[b]).sum()).collect()
    }

    /// Central-difference d g* / d u.
    pub fn g_du_fd(&self, v: &[f64], u: f64, marginal: &[f64]) -> Vec<f64> {
        let h = 1e-5 * (1.0 + u.abs());
        let up = self.g_star(v, u + h, marginal);
        let down = self.g_star(v, u - h, marginal);
        up.iter().zip(&down).map(|(a, b)| (a - b) / (2.0 * h)).collect()
    }
}

fn row_vec(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().cloned().collect()
}

fn check_batch(theta: &DMatrix<f64>, y: &[f64], marginals: &DMatrix<f64>, channel: &ThetaChannel) -> Result<()> {
    let n = theta.nrows();
    if y.len() != n || marginals.nrows() != n || theta.ncols() != channel.l() || marginals.ncols() != channel.l() {
        return Err(CpampError::DimensionMismatch(format!(
            "theta {}x{}, y {}, marginals {}x{}, L = {}",
            theta.nrows(),
            theta.ncols(),
            y.len(),
            marginals.nrows(),
            marginals.ncols(),
            channel.l()
        )));
    }
    Ok(())
}

/// Applies g* row-wise to (Theta, y); row i uses the label marginal in row i of `marginals`.
pub fn g_star_rows(theta: &DMatrix<f64>, y: &[f64], marginals: &DMatrix<f64>, channel: &ThetaChannel) -> Result<DMatrix<f64>> {
    check_batch(theta, y, marginals, channel)?;
    let rows: Vec<Vec<f64>> = (0..theta.nrows())
        .into_par_iter()
        .map(|i| channel.g_star(&row_vec(theta, i), y[i], &row_vec(marginals, i)))
        .collect();
    Ok(DMatrix::from_fn(theta.nrows(), channel.l(), |i, j| rows[i][j]))
}

/// (1/n) sum_i of the row Jacobians of g*.
pub fn mean_g_jacobian(theta: &DMatrix<f64>, y: &[f64], marginals: &DMatrix<f64>, channel: &ThetaChannel) -> Result<DMatrix<f64>> {
    check_batch(theta, y, marginals, channel)?;
    let n = theta.nrows();
    let jacs: Vec<DMatrix<f64>> = (0..n)
        .into_par_iter()
        .map(|i| channel.g_jacobian(&row_vec(theta, i), y[i], &row_vec(marginals, i)))
        .collect();
    let l = channel.l();
    Ok(jacs.iter().fold(DMatrix::zeros(l, l), |a, j| a + j) / n as f64)
}
