//! Change-point GLM data model, the configuration/change-point correspondence,
//! and synthetic data generation.

use crate::error::{invalid, CpampError, Result};
use crate::rng::{derive_seed, normal_matrix, rng_from_seed, std_normal};
use crate::special::sigmoid;
use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Output channel of the generalized linear model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    /// y = z + eps, eps ~ N(0, noise_sd^2).
    Linear { noise_sd: f64 },
    /// y = 1{eps <= sigmoid(z)}, eps ~ U[0, 1].
    Logistic,
    /// y = max(z, 0) + eps, eps ~ N(0, noise_sd^2).
    RectifiedLinear { noise_sd: f64 },
}

/// Law of the per-sample noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisePrior {
    Gaussian { sigma: f64 },
    UniformUnit,
}

impl ModelKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ModelKind::Linear { noise_sd } | ModelKind::RectifiedLinear { noise_sd } => {
                if !(noise_sd >= 0.0) || !noise_sd.is_finite() {
                    return invalid(format!("noise_sd must be finite and >= 0, got {noise_sd}"));
                }
                Ok(())
            }
            ModelKind::Logistic => Ok(()),
        }
    }

    pub fn noise_sd(&self) -> Option<f64> {
        match *self {
            ModelKind::Linear { noise_sd } | ModelKind::RectifiedLinear { noise_sd } => Some(noise_sd),
            ModelKind::Logistic => None,
        }
    }

    pub fn noise_prior(&self) -> NoisePrior {
        match self.noise_sd() {
            Some(sigma) => NoisePrior::Gaussian { sigma },
            None => NoisePrior::UniformUnit,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Linear { .. } => "linear",
            ModelKind::Logistic => "logistic",
            ModelKind::RectifiedLinear { .. } => "relu",
        }
    }

    /// The output function q(z, eps).
    pub fn q(&self, z: f64, eps: f64) -> f64 {
        match self {
            ModelKind::Linear { .. } => z + eps,
            ModelKind::Logistic => {
                if eps <= sigmoid(z) {
                    1.0
                } else {
                    0.0
                }
            }
            ModelKind::RectifiedLinear { .. } => z.max(0.0) + eps,
        }
    }

    pub fn sample_noise<R: Rng>(&self, rng: &mut R) -> f64 {
        match self.noise_sd() {
            Some(s) => s * std_normal(rng),
            None => rng.random::<f64>(),
        }
    }
}

/// The p x L matrix of candidate signals.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMatrix {
    pub entries: DMatrix<f64>,
}

impl SignalMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.ncols() == 0 {
            return invalid("signal matrix needs at least one column");
        }
        if !entries.iter().all(|v| v.is_finite()) {
            return invalid("signal matrix has non-finite entries");
        }
        Ok(SignalMatrix { entries })
    }

    pub fn p(&self) -> usize {
        self.entries.nrows()
    }

    pub fn l(&self) -> usize {
        self.entries.ncols()
    }

    /// Copy with columns `from..L` set to zero.
    pub fn zero_columns_from(&self, from: usize) -> Self {
        let mut e = self.entries.clone();
        for j in from..e.ncols() {
            e.column_mut(j).fill(0.0);
        }
        SignalMatrix { entries: e }
    }
}

/// Per-sample signal labels, 1-based, nondecreasing with +1 jumps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalConfiguration {
    pub psi: Vec<usize>,
}

impl SignalConfiguration {
    pub fn n(&self) -> usize {
        self.psi.len()
    }

    pub fn num_labels(&self) -> usize {
        self.psi.last().copied().unwrap_or(1)
    }
}

/// Sorted change indices (1-based, each in [2, n]); absent change points are not stored.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ChangePointVector {
    pub eta: Vec<usize>,
    pub n: usize,
}

impl ChangePointVector {
    pub fn new(eta: Vec<usize>, n: usize) -> Result<Self> {
        for w in eta.windows(2) {
            if w[0] >= w[1] {
                return invalid(format!("change points must be strictly increasing: {eta:?}"));
            }
        }
        if let Some(&bad) = eta.iter().find(|&&e| e < 2 || e > n) {
            return invalid(format!("change point {bad} outside [2, {n}]"));
        }
        Ok(ChangePointVector { eta, n })
    }

    /// Accepts entries equal to n + 1 as unused slots and drops them.
    pub fn from_padded(padded: &[usize], n: usize) -> Result<Self> {
        for w in padded.windows(2) {
            if w[0] > w[1] {
                return invalid(format!("change points must be sorted: {padded:?}"));
            }
        }
        let eta: Vec<usize> = padded.iter().cloned().filter(|&e| e != n + 1).collect();
        Self::new(eta, n)
    }

    /// Change points at fractions of n: eta = round(alpha * n) + 1.
    pub fn from_fractions(fractions: &[f64], n: usize) -> Result<Self> {
        let eta = fractions
            .iter()
            .map(|&a| {
                if !(a > 0.0 && a < 1.0) {
                    return invalid(format!("fraction {a} outside (0, 1)"));
                }
                Ok((a * n as f64).round() as usize + 1)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(eta, n)
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn fractions(&self) -> Vec<f64> {
        self.eta.iter().map(|&e| e as f64 / self.n as f64).collect()
    }

    /// 0-based row indices where a new segment starts.
    pub fn boundaries(&self) -> Vec<usize> {
        self.eta.iter().map(|&e| e - 1).collect()
    }

    pub fn padded(&self, l: usize) -> Vec<usize> {
        let mut v = self.eta.clone();
        while v.len() + 1 < l {
            v.push(self.n + 1);
        }
        v
    }
}

/// Maps change points to labels: psi_i = l for i in [eta_{l-1}, eta_l).
pub fn eta_to_psi(eta: &ChangePointVector, n: usize, l: usize) -> Result<SignalConfiguration> {
    if eta.n != n {
        return invalid(format!("change-point vector is for n={}, not n={n}", eta.n));
    }
    if eta.len() + 1 > l {
        return invalid(format!("{} change points need more than L={l} signals", eta.len()));
    }
    let mut psi = Vec::with_capacity(n);
    let mut label = 1;
    let mut next = eta.eta.iter().peekable();
    for i in 1..=n {
        while next.peek().is_some_and(|&&e| e == i) {
            label += 1;
            next.next();
        }
        psi.push(label);
    }
    Ok(SignalConfiguration { psi })
}

/// Inverse of [`eta_to_psi`].
pub fn psi_to_eta(psi: &SignalConfiguration) -> Result<ChangePointVector> {
    let n = psi.n();
    if n == 0 {
        return invalid("empty configuration");
    }
    if psi.psi[0] != 1 {
        return invalid("configuration must start with label 1");
    }
    let mut eta = Vec::new();
    for i in 1..n {
        match psi.psi[i] as i64 - psi.psi[i - 1] as i64 {
            0 => {}
            1 => eta.push(i + 1),
            _ => return invalid(format!("labels must be nondecreasing with +1 jumps (index {})", i + 1)),
        }
    }
    ChangePointVector::new(eta, n)
}

/// Ground truth attached to a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub signal: SignalMatrix,
    pub config: SignalConfiguration,
    pub eta: ChangePointVector,
    pub noise: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// n x p design with i.i.d. N(0, 1/n) entries.
    pub design: DMatrix<f64>,
    pub response: Vec<f64>,
    pub model: ModelKind,
    pub seed: u64,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn p(&self) -> usize {
        self.design.ncols()
    }

    pub fn delta(&self) -> f64 {
        self.n() as f64 / self.p() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.response.len() != self.n() {
            return Err(CpampError::DimensionMismatch(format!(
                "response length {} vs {} design rows",
                self.response.len(),
                self.n()
            )));
        }
        if self.response.iter().any(|v| !v.is_finite()) || !crate::linalg::is_finite(&self.design) {
            return invalid("dataset contains non-finite values");
        }
        Ok(())
    }
}

/// Samples X, the noise, and y = q(X_i^T beta^(psi_i), eps_i).
pub fn generate_dataset(
    n: usize,
    p: usize,
    model: ModelKind,
    signal: &SignalMatrix,
    eta: &ChangePointVector,
    seed: u64,
) -> Result<Dataset> {
    model.validate()?;
    if n == 0 || p == 0 {
        return invalid("n and p must be positive");
    }
    if signal.p() != p {
        return Err(CpampError::DimensionMismatch(format!("signal has {} rows, p = {p}", signal.p())));
    }
    let config = eta_to_psi(eta, n, signal.l())?;
    let design = normal_matrix(&mut rng_from_seed(derive_seed(seed, &[0])), n, p, 1.0 / (n as f64).sqrt());
    let mut noise_rng = rng_from_seed(derive_seed(seed, &[1]));
    let noise: Vec<f64> = (0..n).map(|_| model.sample_noise(&mut noise_rng)).collect();
    let xb = &design * &signal.entries;
    let response = (0..n)
        .map(|i| model.q(xb[(i, config.psi[i] - 1)], noise[i]))
        .collect();
    Ok(Dataset {
        design,
        response,
        model,
        seed,
        truth: Some(Truth { signal: signal.clone(), config, eta: eta.clone(), noise }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cp(eta: &[usize], n: usize) -> ChangePointVector {
        ChangePointVector::new(eta.to_vec(), n).unwrap()
    }

    #[test]
    fn eta_to_psi_examples() {
        assert_eq!(eta_to_psi(&cp(&[4], 6), 6, 2).unwrap().psi, vec![1, 1, 1, 2, 2, 2]);
        assert_eq!(eta_to_psi(&cp(&[], 5), 5, 3).unwrap().psi, vec![1; 5]);
        assert_eq!(
            eta_to_psi(&cp(&[3, 7], 9), 9, 3).unwrap().psi,
            vec![1, 1, 2, 2, 2, 2, 3, 3, 3]
        );
    }

    #[test]
    fn psi_to_eta_examples() {
        let f = |v: &[usize]| psi_to_eta(&SignalConfiguration { psi: v.to_vec() }).unwrap().eta;
        assert_eq!(f(&[1, 1, 2, 2]), vec![3]);
        assert_eq!(f(&[1]), Vec::<usize>::new());
        assert_eq!(f(&[1, 2, 3]), vec![2, 3]);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(ChangePointVector::new(vec![5, 3], 9).is_err());
        assert!(ChangePointVector::new(vec![1], 9).is_err());
        assert!(ChangePointVector::new(vec![10], 9).is_err());
        assert!(ChangePointVector::new(vec![4, 4], 9).is_err());
        assert!(psi_to_eta(&SignalConfiguration { psi: vec![1, 3] }).is_err());
        assert!(psi_to_eta(&SignalConfiguration { psi: vec![1, 2, 1] }).is_err());
        assert!(psi_to_eta(&SignalConfiguration { psi: vec![2, 2] }).is_err());
        assert!(eta_to_psi(&cp(&[3, 7], 9), 9, 2).is_err());
    }

    #[test]
    fn padded_round_trip() {
        let e = ChangePointVector::from_padded(&[4, 10, 10], 9).unwrap();
        assert_eq!(e.eta, vec![4]);
        assert_eq!(e.padded(4), vec![4, 10, 10]);
    }

    #[test]
    fn zero_signal_zero_noise_gives_zero_response() {
        let b = SignalMatrix::new(DMatrix::zeros(5, 2)).unwrap();
        let d = generate_dataset(20, 5, ModelKind::Linear { noise_sd: 0.0 }, &b, &cp(&[11], 20), 1).unwrap();
        assert!(d.response.iter().all(|&y| y == 0.0));
    }

    #[test]
    fn relu_flat_branch() {
        let b = SignalMatrix::new(DMatrix::from_element(3, 1, 1.0)).unwrap();
        let d = generate_dataset(50, 3, ModelKind::RectifiedLinear { noise_sd: 0.0 }, &b, &cp(&[], 50), 4)
            .unwrap();
        let xb = &d.design * &b.entries;
        for i in 0..50 {
            if xb[(i, 0)] < 0.0 {
                assert_eq!(d.response[i], 0.0);
            } else {
                assert_eq!(d.response[i], xb[(i, 0)]);
            }
        }
    }

    #[test]
    fn logistic_zero_signal_is_fair_coin() {
        let n = 100_000;
        let b = SignalMatrix::new(DMatrix::zeros(1, 1)).unwrap();
        let d = generate_dataset(n, 1, ModelKind::Logistic, &b, &cp(&[], n), 11).unwrap();
        let mean = d.response.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 3.0 * (0.25 / n as f64).sqrt(), "{mean}");
    }

    #[test]
    fn design_column_variance() {
        let n = 20_000;
        let b = SignalMatrix::new(DMatrix::zeros(3, 1)).unwrap();
        let d = generate_dataset(n, 3, ModelKind::Linear { noise_sd: 1.0 }, &b, &cp(&[], n), 5).unwrap();
        for j in 0..3 {
            let col = d.design.column(j);
            let m = col.mean();
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            let rel = (v * n as f64 - 1.0).abs();
            assert!(rel < 5.0 / (n as f64).sqrt(), "{rel}");
        }
    }

    #[test]
    fn linear_residual_equals_noise_and_is_reproducible() {
        let p = 8;
        let n = 30;
        let b = SignalMatrix::new(normal_matrix(&mut rng_from_seed(2), p, 3, 1.0)).unwrap();
        let eta = cp(&[10, 21], n);
        let m = ModelKind::Linear { noise_sd: 0.3 };
        let d = generate_dataset(n, p, m, &b, &eta, 9).unwrap();
        let d2 = generate_dataset(n, p, m, &b, &eta, 9).unwrap();
        assert_eq!(d, d2);
        let t = d.truth.as_ref().unwrap();
        let xb = &d.design * &b.entries;
        for i in 0..n {
            // Exact up to the rounding of one addition.
            let z = xb[(i, t.config.psi[i] - 1)];
            let r = d.response[i] - z;
            assert!((r - t.noise[i]).abs() <= 2.0 * f64::EPSILON * (z.abs() + t.noise[i].abs()));
        }
    }

    #[test]
    fn generate_rejects_dimension_mismatch() {
        let b = SignalMatrix::new(DMatrix::zeros(4, 2)).unwrap();
        assert!(generate_dataset(10, 5, ModelKind::Logistic, &b, &cp(&[], 10), 0).is_err());
        assert!(ModelKind::Linear { noise_sd: -1.0 }.validate().is_err());
    }
}
