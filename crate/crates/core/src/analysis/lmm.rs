use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use super::FeatureTable;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub beta0: f64,
    pub beta1: f64,
    pub sigma_u2: f64,
    pub sigma_eps2: f64,
    pub log_likelihood: f64,
    pub log_likelihood_lm: f64,
    pub icc: f64,
    pub r2m: f64,
    pub bic_lmm: f64,
    pub bic_lm: f64,
    /// `bic_lm − bic_lmm`; positive favours the random intercept.
    pub delta_bic: f64,
}

pub fn icc(sigma_u2: f64, sigma_eps2: f64) -> Result<f64> {
    if !(sigma_u2 >= 0.0 && sigma_eps2 >= 0.0) {
        return Err(Error::Domain(format!("variances must be non-negative: {sigma_u2}, {sigma_eps2}")));
    }
    if sigma_u2 + sigma_eps2 == 0.0 {
        return Err(Error::Domain("both variance components are zero".into()));
    }
    Ok(sigma_u2 / (sigma_u2 + sigma_eps2))
}

struct Group {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
}

struct Profile {
    beta: Vector2<f64>,
    sigma2: f64,
    loglik: f64,
}

/// Profiled ML fit at variance ratio `gamma = σu²/σε²`.
fn profile(groups: &[Group], n: f64, gamma: f64) -> Option<Profile> {
    let mut a = Matrix2::zeros();
    let mut b = Vector2::zeros();
    let mut logdet = 0.0;
    for g in groups {
        let c = gamma / (1.0 + gamma * g.n);
        // Xᵀ(I − c11ᵀ)X and Xᵀ(I − c11ᵀ)y with X = [1, x]
        a[(0, 0)] += g.n - c * g.n * g.n;
        a[(0, 1)] += g.sx - c * g.n * g.sx;
        a[(1, 1)] += g.sxx - c * g.sx * g.sx;
        b[0] += g.sy - c * g.n * g.sy;
        b[1] += g.sxy - c * g.sx * g.sy;
        logdet += (1.0 + gamma * g.n).ln();
    }
    a[(1, 0)] = a[(0, 1)];
    let beta = a.try_inverse()? * b;
    let (b0, b1) = (beta[0], beta[1]);
    let mut q = 0.0;
    for g in groups {
        let c = gamma / (1.0 + gamma * g.n);
        let rr = g.syy - 2.0 * b0 * g.sy - 2.0 * b1 * g.sxy + b0 * b0 * g.n + 2.0 * b0 * b1 * g.sx + b1 * b1 * g.sxx;
        let rs = g.sy - b0 * g.n - b1 * g.sx;
        q += rr - c * rs * rs;
    }
    let sigma2 = q / n;
    if !(sigma2 > 0.0) {
        return None;
    }
    let loglik = -0.5 * n * ((2.0 * std::f64::consts::PI).ln() + sigma2.ln() + 1.0) - 0.5 * logdet;
    Some(Profile { beta, sigma2, loglik })
}

const GRID: usize = 200;
const MAX_ITER: usize = 200;
const TOL: f64 = 1e-12;

/// Random-intercept model `y = β0 + β1 x + u_group + ε` by maximum
/// likelihood, profiling out β and σε² and searching the variance ratio.
pub fn fit_lmm(table: &FeatureTable, response: &str, predictor: &str, group_col: &str) -> Result<LmmFit> {
    let y = table.column(response)?;
    let x = table.column(predictor)?;
    let gid = table.groups(group_col)?;
    let mut map: BTreeMap<usize, Group> = BTreeMap::new();
    for i in 0..y.len() {
        let g = map.entry(gid[i]).or_insert(Group {
            n: 0.0,
            sx: 0.0,
            sy: 0.0,
            sxx: 0.0,
            sxy: 0.0,
            syy: 0.0,
        });
        g.n += 1.0;
        g.sx += x[i];
        g.sy += y[i];
        g.sxx += x[i] * x[i];
        g.sxy += x[i] * y[i];
        g.syy += y[i] * y[i];
    }
    if map.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 groups, got {}", map.len())));
    }
    if let Some((id, g)) = map.iter().find(|(_, g)| g.n < 2.0) {
        return Err(Error::Domain(format!("group {id} has {} observation(s); need at least 2", g.n)));
    }
    let groups: Vec<Group> = map.into_values().collect();
    let n = y.len() as f64;
    let at = |t: f64| profile(&groups, n, t / (1.0 - t));
    let lm = at(0.0).ok_or_else(|| Error::Domain("predictor is constant or response is degenerate".into()))?;

    let mut trace = Vec::new();
    let mut best = (0usize, lm.loglik);
    for i in 1..GRID {
        if let Some(p) = at(i as f64 / GRID as f64) {
            if p.loglik > best.1 {
                best = (i, p.loglik);
            }
        }
    }
    let mut lo = best.0.saturating_sub(1) as f64 / GRID as f64;
    let mut hi = ((best.0 + 1) as f64 / GRID as f64).min(1.0 - 1e-9);
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let f = |t: f64| at(t).map_or(f64::NEG_INFINITY, |p| p.loglik);
    let mut c = hi - ratio * (hi - lo);
    let mut d = lo + ratio * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    let mut iter = 0;
    while hi - lo > TOL {
        if iter == MAX_ITER {
            return Err(Error::Convergence {
                iterations: iter,
                trace: trace.join("; "),
            });
        }
        if fc >= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - ratio * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + ratio * (hi - lo);
            fd = f(d);
        }
        if iter % 20 == 0 {
            trace.push(format!("[{lo:.3e}, {hi:.3e}]"));
        }
        iter += 1;
    }
    let mut t_hat = 0.5 * (lo + hi);
    let mut fit = at(t_hat).filter(|p| p.loglik.is_finite());
    // the boundary γ = 0 is part of the parameter space
    if fit.as_ref().is_none_or(|p| p.loglik < lm.loglik) {
        t_hat = 0.0;
        fit = at(0.0);
    }
    let fit = fit.ok_or_else(|| Error::Convergence {
        iterations: iter,
        trace: trace.join("; "),
    })?;
    let gamma = t_hat / (1.0 - t_hat);
    let sigma_eps2 = fit.sigma2;
    let sigma_u2 = gamma * sigma_eps2;
    let (b0, b1) = (fit.beta[0], fit.beta[1]);
    let xm = x.iter().sum::<f64>() / n;
    let var_f = b1 * b1 * x.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / n;
    let bic_lmm = -2.0 * fit.loglik + 4.0 * n.ln();
    let bic_lm = -2.0 * lm.loglik + 3.0 * n.ln();
    Ok(LmmFit {
        beta0: b0,
        beta1: b1,
        sigma_u2,
        sigma_eps2,
        log_likelihood: fit.loglik,
        log_likelihood_lm: lm.loglik,
        icc: icc(sigma_u2, sigma_eps2)?,
        r2m: var_f / (var_f + sigma_eps2 + sigma_u2),
        bic_lmm,
        bic_lm,
        delta_bic: bic_lm - bic_lmm,
    })
}
