use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const LOGISTIC_L2: f64 = 1e-6;
const MAX_ITER: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl LogisticFit {
    pub fn score(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

fn log1pexp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// L2-penalized logistic regression by iteratively reweighted least squares
/// with step halving. The intercept is not penalized.
pub fn fit_logistic(rows: &[Vec<f64>], y: &[bool]) -> Result<LogisticFit> {
    if rows.len() != y.len() {
        return Err(Error::LengthMismatch(rows.len(), y.len()));
    }
    if !y.iter().any(|&v| v) || y.iter().all(|&v| v) {
        return Err(Error::Domain("both classes must be present".into()));
    }
    let n = rows.len();
    let p = rows[0].len() + 1;
    let x = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] });
    let t = DVector::from_fn(n, |i, _| if y[i] { 1.0 } else { 0.0 });
    let pen = DMatrix::from_fn(p, p, |i, j| if i == j && i > 0 { LOGISTIC_L2 } else { 0.0 });
    let objective = |b: &DVector<f64>| -> f64 {
        let eta = &x * b;
        let nll: f64 = (0..n).map(|i| log1pexp(eta[i]) - t[i] * eta[i]).sum();
        nll + 0.5 * LOGISTIC_L2 * b.rows(1, p - 1).norm_squared()
    };
    let mut beta = DVector::zeros(p);
    let mut obj = objective(&beta);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..MAX_ITER {
        iterations = it + 1;
        let eta = &x * &beta;
        let mu = eta.map(|e| 1.0 / (1.0 + (-e).exp()));
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-12));
        let mut grad = x.transpose() * (&mu - &t);
        grad += &pen * &beta;
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * w[i]);
        let hess = x.transpose() * xw + &pen + DMatrix::identity(p, p) * 1e-12;
        let step = hess
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or_else(|| Error::Domain("singular logistic Hessian".into()))?;
        let mut s = 1.0;
        let mut next = &beta - &step * s;
        let mut next_obj = objective(&next);
        while next_obj > obj && s > 1e-10 {
            s *= 0.5;
            next = &beta - &step * s;
            next_obj = objective(&next);
        }
        let delta = obj - next_obj;
        beta = next;
        obj = next_obj;
        if delta.abs() <= 1e-10 * (1.0 + obj.abs()) {
            converged = true;
            break;
        }
    }
    Ok(LogisticFit {
        intercept: beta[0],
        coef: beta.iter().skip(1).copied().collect(),
        iterations,
        converged,
    })
}

/// Area under the ROC curve as the Mann–Whitney probability that a positive
/// outranks a negative; ties count one half.
pub fn auc(scores: &[f64], y: &[bool]) -> Result<f64> {
    if scores.len() != y.len() {
        return Err(Error::LengthMismatch(scores.len(), y.len()));
    }
    let n_pos = y.iter().filter(|&&v| v).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Domain("both classes must be present".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j + 1) as f64 / 2.0;
        rank_sum += idx[i..j].iter().filter(|&&k| y[k]).count() as f64 * mid;
        i = j;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// In-sample AUC of a logistic fit.
pub fn fit_logistic_auc(rows: &[Vec<f64>], y: &[bool]) -> Result<f64> {
    let fit = fit_logistic(rows, y)?;
    let scores: Vec<f64> = rows.iter().map(|r| fit.score(r)).collect();
    auc(&scores, y)
}
