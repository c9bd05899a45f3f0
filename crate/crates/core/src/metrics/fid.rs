use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const FID_REGULARIZATION: f64 = 1e-6;

/// Per-image feature vectors, one row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.len() < 2 {
            return Err(Error::EmptyInput(format!("feature set needs at least 2 rows, got {}", rows.len())));
        }
        let d = rows[0].len();
        if d == 0 {
            return Err(Error::EmptyInput("zero-dimensional features".into()));
        }
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::LengthMismatch(d, r.len()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite feature".into()));
        }
        Ok(Self {
            rows: DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn mean(&self) -> DVector<f64> {
        self.rows.row_mean().transpose()
    }

    /// Sample covariance with the `n − 1` denominator.
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.rows.row_mean();
        let mut c = self.rows.clone();
        for mut r in c.row_iter_mut() {
            r -= &mu;
        }
        (c.transpose() * c) / (self.n_rows() as f64 - 1.0)
    }
}

fn is_singular(m: &DMatrix<f64>) -> bool {
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let max = ev.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    ev.iter().any(|&e| e <= 1e-12 * max.max(1.0))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets. Covariances
/// get a `1e-6` diagonal load when either is singular.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::LengthMismatch(a.dim(), b.dim()));
    }
    let mut sa = a.covariance();
    let mut sb = b.covariance();
    if is_singular(&sa) || is_singular(&sb) {
        let eye = DMatrix::<f64>::identity(a.dim(), a.dim()) * FID_REGULARIZATION;
        sa += &eye;
        sb += &eye;
    }
    let diff = a.mean() - b.mean();
    let ra = sqrt_psd(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let v = diff.norm_squared() + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(v.max(0.0))
}
