//! Loss terms of the harmonization objective and their gradients.
//!
//! Every function works on plain `f64` slices and returns the loss value with
//! its gradient with respect to each differentiable input, so the trainer
//! can seed the autograd tape directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_EPS, 1 - PROB_EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: f64,
    /// One gradient vector per differentiable input, in argument order.
    pub grads: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_cc: f64,
    pub lambda_rec: f64,
    pub lambda_lat: f64,
    pub lambda_kl: f64,
    pub lambda_sf: f64,
    pub lambda_adv_b: f64,
    pub lambda_cls_s: f64,
    pub lambda_adv_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_cc: 10.0,
            lambda_rec: 10.0,
            lambda_lat: 8.0,
            lambda_kl: 0.01,
            lambda_sf: 7.0,
            lambda_adv_b: 1.0,
            lambda_cls_s: 3.0,
            lambda_adv_s: 10.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            lambda_cc: 0.0,
            lambda_rec: 0.0,
            lambda_lat: 0.0,
            lambda_kl: 0.0,
            lambda_sf: 0.0,
            lambda_adv_b: 0.0,
            lambda_cls_s: 0.0,
            lambda_adv_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cc,
            self.lambda_rec,
            self.lambda_lat,
            self.lambda_kl,
            self.lambda_sf,
            self.lambda_adv_b,
            self.lambda_cls_s,
            self.lambda_adv_s,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Per-iteration values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub cc: f64,
    pub rec: f64,
    pub adv_b: f64,
    pub cls_s: f64,
    pub adv_s: f64,
    pub sf: f64,
    pub kl: f64,
    pub lat: f64,
    pub total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,L_cc,L_rec,L_adv_b,L_cls_s,L_adv_s,L_sf,L_KL,L_lat,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter, self.cc, self.rec, self.adv_b, self.cls_s, self.adv_s, self.sf, self.kl, self.lat, self.total
        )
    }

    pub fn parse_csv_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Config(format!("training log row has {} fields", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|e| Error::Config(format!("bad training log field {:?}: {e}", f[i])))
        };
        Ok(Self {
            iter: f[0].parse().map_err(|e| Error::Config(format!("bad iteration: {e}")))?,
            cc: num(1)?,
            rec: num(2)?,
            adv_b: num(3)?,
            cls_s: num(4)?,
            adv_s: num(5)?,
            sf: num(6)?,
            kl: num(7)?,
            lat: num(8)?,
            total: num(9)?,
        })
    }

    pub fn is_finite(&self) -> bool {
        [self.cc, self.rec, self.adv_b, self.cls_s, self.adv_s, self.sf, self.kl, self.lat, self.total]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Fills `total` from the individual terms.
    pub fn with_total(mut self, w: &LossWeights) -> Self {
        self.total = total_loss(&self, w);
        self
    }
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("loss input".into()));
    }
    Ok(())
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_mean(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(pred, target)?;
    let n = pred.len() as f64;
    let value = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, grad))
}

fn paired_l1(x_k: &[f64], x_h: &[f64], y_k: &[f64], y_h: &[f64]) -> Result<Loss> {
    let (a, ga) = l1_mean(y_k, x_k)?;
    let (b, gb) = l1_mean(y_h, x_h)?;
    Ok(Loss {
        value: a + b,
        grads: vec![ga, gb],
    })
}

/// Cross-cycle reconstruction error; gradients w.r.t. `xhat_k`, `xhat_h`.
pub fn cycle_consistency_loss(x_k: &[f64], x_h: &[f64], xhat_k: &[f64], xhat_h: &[f64]) -> Result<Loss> {
    paired_l1(x_k, x_h, xhat_k, xhat_h)
}

/// Direct reconstruction error; gradients w.r.t. `xhat_kk`, `xhat_hh`.
pub fn self_reconstruction_loss(x_k: &[f64], x_h: &[f64], xhat_kk: &[f64], xhat_hh: &[f64]) -> Result<Loss> {
    paired_l1(x_k, x_h, xhat_kk, xhat_hh)
}

fn check_prob(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// `d/dp` of a clamped input is zero where the clamp is active.
fn clamp_active(p: f64) -> bool {
    p <= PROB_EPS || p >= 1.0 - PROB_EPS
}

/// `½·mean log(p(1-p))` over one branch, with gradient.
fn half_log_pq(ps: &[f64]) -> Result<(f64, Vec<f64>)> {
    if ps.is_empty() {
        return Err(Error::EmptyInput("discriminator output".into()));
    }
    let n = ps.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(ps.len());
    for &raw in ps {
        let p = check_prob(raw)?;
        value += (p * (1.0 - p)).ln();
        grad.push(if clamp_active(raw) {
            0.0
        } else {
            0.5 / n * (1.0 / p - 1.0 / (1.0 - p))
        });
    }
    Ok((0.5 * value / n, grad))
}

/// Brain-structure adversarial term on the brain discriminator's probability
/// of the true scanner, one slice per branch (batch items).
pub fn brain_adversarial_loss(db_out_k: &[f64], db_out_h: &[f64]) -> Result<Loss> {
    let (a, ga) = half_log_pq(db_out_k)?;
    let (b, gb) = half_log_pq(db_out_h)?;
    Ok(Loss {
        value: a + b,
        grads: vec![ga, gb],
    })
}

/// Sum over items of the negative log-probability of the true class.
/// Gradients are w.r.t. each probability vector.
pub fn scanner_classification_loss(probs: &[&[f64]], true_labels: &[usize]) -> Result<Loss> {
    if probs.len() != true_labels.len() {
        return Err(Error::LengthMismatch(probs.len(), true_labels.len()));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(probs.len());
    for (p, &c) in probs.iter().zip(true_labels) {
        if c >= p.len() {
            return Err(Error::Label(format!("class {c} out of {} outputs", p.len())));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::Domain(format!("probabilities sum to {sum}")));
        }
        let raw = p[c];
        if raw <= PROB_EPS {
            log::warn!("true-class probability {raw} clamped to {PROB_EPS}");
        }
        let pc = check_prob(raw)?;
        value -= pc.ln();
        let mut g = vec![0.0; p.len()];
        if !clamp_active(raw) {
            g[c] = -1.0 / pc;
        }
        grads.push(g);
    }
    Ok(Loss { value, grads })
}

/// `½·mean log(D(real)·(1 - D(fake)))` per domain, summed over both domains.
/// Gradients are w.r.t. `real_k, fake_k, real_h, fake_h`.
pub fn scanner_adversarial_loss(real_k: &[f64], fake_k: &[f64], real_h: &[f64], fake_h: &[f64]) -> Result<Loss> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(4);
    for (real, fake) in [(real_k, fake_k), (real_h, fake_h)] {
        check_len(real, fake)?;
        let n = real.len() as f64;
        let mut gr = Vec::with_capacity(real.len());
        let mut gf = Vec::with_capacity(fake.len());
        for (&r_raw, &f_raw) in real.iter().zip(fake) {
            let r = check_prob(r_raw)?;
            let f = check_prob(f_raw)?;
            value += 0.5 * (r * (1.0 - f)).ln() / n;
            gr.push(if clamp_active(r_raw) { 0.0 } else { 0.5 / (n * r) });
            gf.push(if clamp_active(f_raw) { 0.0 } else { -0.5 / (n * (1.0 - f)) });
        }
        grads.push(gr);
        grads.push(gf);
    }
    Ok(Loss { value, grads })
}

/// Non-saturating generator counterpart of the scanner adversarial term:
/// `-½·mean log D(fake)` per domain, summed.
pub fn generator_adversarial_loss(fake_k: &[f64], fake_h: &[f64]) -> Result<Loss> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(2);
    for fake in [fake_k, fake_h] {
        if fake.is_empty() {
            return Err(Error::EmptyInput("discriminator output".into()));
        }
        let n = fake.len() as f64;
        let mut g = Vec::with_capacity(fake.len());
        for &raw in fake {
            let f = check_prob(raw)?;
            value -= 0.5 * f.ln() / n;
            g.push(if clamp_active(raw) { 0.0 } else { -0.5 / (n * f) });
        }
        grads.push(g);
    }
    Ok(Loss { value, grads })
}

/// Mean L1 distance between the scanner embeddings of the two scanner-free
/// generations; gradients w.r.t. both.
pub fn scanner_free_loss(zhat_kf: &[f64], zhat_hf: &[f64]) -> Result<Loss> {
    let (value, g) = l1_mean(zhat_kf, zhat_hf)?;
    let neg = g.iter().map(|v| -v).collect();
    Ok(Loss {
        value,
        grads: vec![g, neg],
    })
}

/// `KL(N(mu, diag sigma²) ‖ N(0, I)) = ½·Σ(σ² + μ² − 1 − 2 ln σ)`; gradients
/// w.r.t. `mu` and `sigma`.
pub fn kl_loss(mu: &[f64], sigma: &[f64]) -> Result<Loss> {
    check_len(mu, sigma)?;
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("sigma must be positive, got {s}")));
    }
    let value = 0.5
        * mu
            .iter()
            .zip(sigma)
            .map(|(m, s)| s * s + m * m - 1.0 - 2.0 * s.ln())
            .sum::<f64>();
    let gmu = mu.to_vec();
    let gsigma = sigma.iter().map(|s| s - 1.0 / s).collect();
    Ok(Loss {
        value,
        grads: vec![gmu, gsigma],
    })
}

/// Mean squared posterior mean; gradient w.r.t. `mu`.
pub fn latent_loss(mu: &[f64]) -> Result<Loss> {
    if mu.is_empty() {
        return Err(Error::EmptyInput("latent mean".into()));
    }
    let n = mu.len() as f64;
    let value = mu.iter().map(|m| m * m).sum::<f64>() / n;
    Ok(Loss {
        value,
        grads: vec![mu.iter().map(|m| 2.0 * m / n).collect()],
    })
}

/// Weighted total: reconstruction-type terms add, adversarial and
/// classification terms subtract.
pub fn total_loss(r: &LossReport, w: &LossWeights) -> f64 {
    w.lambda_cc * r.cc + w.lambda_rec * r.rec + w.lambda_lat * r.lat + w.lambda_kl * r.kl + w.lambda_sf * r.sf
        - w.lambda_adv_b * r.adv_b
        - w.lambda_cls_s * r.cls_s
        - w.lambda_adv_s * r.adv_s
}
