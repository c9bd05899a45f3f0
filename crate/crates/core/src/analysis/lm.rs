use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FeatureTable, MeanSd};
use crate::error::{Error, Result};

pub const RIDGE_FALLBACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    /// Intercept first.
    pub coef: Vec<f64>,
    pub rss: f64,
    pub ridge: bool,
}

impl OlsFit {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// `n·ln(RSS/n) + p·ln(n)` with `p` counting the intercept.
    pub fn bic(&self, n: usize) -> f64 {
        let nf = n as f64;
        nf * (self.rss / nf).ln() + self.coef.len() as f64 * nf.ln()
    }
}

/// Least squares with an intercept; falls back to a tiny ridge when the
/// normal equations are singular.
pub fn ols(rows: &[Vec<f64>], y: &[f64]) -> Result<OlsFit> {
    if rows.len() != y.len() {
        return Err(Error::LengthMismatch(rows.len(), y.len()));
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput("no rows to fit".into()));
    }
    let p = rows[0].len() + 1;
    let x = DMatrix::from_fn(rows.len(), p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let yv = DVector::from_column_slice(y);
    let xtx = x.transpose() * &x;
    let xty = x.transpose() * &yv;
    let full_rank = x.clone().svd(false, false).rank(1e-10 * x.norm().max(1.0)) == p;
    let (beta, ridge) = match xtx.clone().cholesky().filter(|_| full_rank) {
        Some(ch) => (ch.solve(&xty), false),
        None => {
            log::warn!("rank-deficient design; using ridge {RIDGE_FALLBACK}");
            let reg = xtx + DMatrix::identity(p, p) * RIDGE_FALLBACK;
            let beta = reg
                .cholesky()
                .map(|c| c.solve(&xty))
                .ok_or_else(|| Error::Domain("design matrix is degenerate even with ridge".into()))?;
            (beta, true)
        }
    };
    let resid = &yv - &x * &beta;
    Ok(OlsFit {
        coef: beta.iter().copied().collect(),
        rss: resid.norm_squared(),
        ridge,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub r2: MeanSd,
    pub rmse: MeanSd,
    pub bic: MeanSd,
    pub folds: usize,
}

fn standardize_with(rows: &[Vec<f64>], mean: &[f64], sd: &[f64]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect())
        .collect()
}

/// k-fold cross-validated linear regression of `target` on `feature_cols`.
/// Features are standardized with training-fold statistics; R² and RMSE are
/// out-of-fold, BIC comes from the training fit.
pub fn fit_age_lm_cv(table: &FeatureTable, feature_cols: &[&str], target: &str, k: usize, seed: u64) -> Result<CvSummary> {
    let n = table.n_rows();
    if k < 2 || n < k {
        return Err(Error::Config(format!("need 2 <= k <= n, got k={k}, n={n}")));
    }
    if feature_cols.is_empty() {
        return Err(Error::Config("no feature columns".into()));
    }
    let y = table.column(target)?;
    let cols: Vec<&[f64]> = feature_cols.iter().map(|c| table.column(c)).collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut r2s, mut rmses, mut bics) = (Vec::new(), Vec::new(), Vec::new());
    for f in 0..k {
        let lo = f * n / k;
        let hi = (f + 1) * n / k;
        let test: Vec<usize> = order[lo..hi].to_vec();
        let train: Vec<usize> = order[..lo].iter().chain(&order[hi..]).copied().collect();
        let d = feature_cols.len();
        let tn = train.len() as f64;
        let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|&i| rows[i][j]).sum::<f64>() / tn).collect();
        let sd: Vec<f64> = (0..d)
            .map(|j| {
                let v = train.iter().map(|&i| (rows[i][j] - mean[j]).powi(2)).sum::<f64>() / tn;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let pick = |idx: &[usize]| idx.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>();
        let xtr = standardize_with(&pick(&train), &mean, &sd);
        let xte = standardize_with(&pick(&test), &mean, &sd);
        let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
        let fit = ols(&xtr, &ytr)?;
        let pred: Vec<f64> = xte.iter().map(|r| fit.predict(r)).collect();
        let ss_res: f64 = pred.iter().zip(&yte).map(|(p, t)| (p - t).powi(2)).sum();
        let ym = yte.iter().sum::<f64>() / yte.len() as f64;
        let ss_tot: f64 = yte.iter().map(|t| (t - ym).powi(2)).sum();
        r2s.push(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 });
        rmses.push((ss_res / yte.len() as f64).sqrt());
        bics.push(fit.bic(train.len()));
    }
    Ok(CvSummary {
        r2: MeanSd::of(&r2s),
        rmse: MeanSd::of(&rmses),
        bic: MeanSd::of(&bics),
        folds: k,
    })
}
