//! Small symmetric-matrix utilities (L x L, L rarely above 4).

use crate::error::{CpampError, Result};
use crate::special::LN_2PI;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative eigenvalue floor used for pseudo-inverses.
pub const EIG_FLOOR_REL: f64 = 1e-12;
/// Tolerance for declaring a symmetric matrix PSD, relative to its trace.
pub const PSD_TOL_REL: f64 = 1e-8;

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigen-based factorization of a symmetric PSD matrix with a floored pseudo-inverse.
#[derive(Debug, Clone)]
pub struct SymFactor {
    pub pinv: DMatrix<f64>,
    /// Symmetric square root Q diag(sqrt(max(lambda, 0))) Q^T.
    pub root: DMatrix<f64>,
    pub log_pdet: f64,
    pub rank: usize,
    pub min_eig: f64,
    pub max_eig: f64,
}

impl SymFactor {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let dim = m.nrows();
        let s = symmetrize(m);
        let eig = SymmetricEigen::new(s);
        let trace: f64 = eig.eigenvalues.iter().sum();
        let floor = (EIG_FLOOR_REL * trace / dim.max(1) as f64).max(f64::MIN_POSITIVE);
        let q = &eig.eigenvectors;
        let mut inv_diag = DVector::zeros(dim);
        let mut root_diag = DVector::zeros(dim);
        let mut log_pdet = 0.0;
        let mut rank = 0;
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam > floor {
                inv_diag[k] = 1.0 / lam;
                log_pdet += lam.ln();
                rank += 1;
            }
            root_diag[k] = lam.max(0.0).sqrt();
        }
        let pinv = q * DMatrix::from_diagonal(&inv_diag) * q.transpose();
        let root = q * DMatrix::from_diagonal(&root_diag) * q.transpose();
        let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let max_eig = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        SymFactor { pinv, root, log_pdet, rank, min_eig, max_eig }
    }

    /// Log density of N(0, M) at x on the support of M (pseudo-determinant form).
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let q = quad_form(&self.pinv, x);
        -0.5 * q - 0.5 * self.log_pdet - 0.5 * self.rank as f64 * LN_2PI
    }

    pub fn condition_number(&self) -> f64 {
        if self.min_eig <= 0.0 {
            f64::INFINITY
        } else {
            self.max_eig / self.min_eig
        }
    }
}

pub fn pinv_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    SymFactor::new(m).pinv
}

pub fn psd_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    SymFactor::new(m).root
}

pub fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Errors unless the smallest eigenvalue is at least -1e-8 times the trace.
pub fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let lam = min_eigenvalue(m);
    let tol = PSD_TOL_REL * m.trace().abs();
    if !lam.is_finite() || lam < -tol {
        return Err(CpampError::NotPsd(format!("{what}: smallest eigenvalue {lam:e}")));
    }
    Ok(())
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |a, v| a.max(v.abs()))
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |x| x.len());
    if rows.iter().any(|x| x.len() != c) {
        return Err(CpampError::DimensionMismatch("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

/// Serde adapter writing a matrix as nested row arrays.
pub mod nested {
    use nalgebra::DMatrix;
    use serde::{de::Error, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
        super::matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        super::matrix_from_rows(&rows).map_err(D::Error::custom)
    }
}

/// Finite-difference step used throughout: 1e-5 (1 + |x|).
pub fn fd_step(x: &[f64]) -> f64 {
    1e-5 * (1.0 + x.iter().map(|v| v * v).sum::<f64>().sqrt())
}

/// Central-difference Jacobian J[a][b] = d f_a / d x_b.
pub fn fd_jacobian<F: Fn(&[f64]) -> Vec<f64>>(f: F, x: &[f64], h: f64) -> DMatrix<f64> {
    let dim = x.len();
    let mut xp = x.to_vec();
    let mut cols = Vec::with_capacity(dim);
    for b in 0..dim {
        xp[b] = x[b] + h;
        let up = f(&xp);
        xp[b] = x[b] - h;
        let down = f(&xp);
        xp[b] = x[b];
        cols.push(up.iter().zip(&down).map(|(u, d)| (u - d) / (2.0 * h)).collect::<Vec<_>>());
    }
    let out = cols.first().map_or(0, |c| c.len());
    DMatrix::from_fn(out, dim, |a, b| cols[b][a])
}
