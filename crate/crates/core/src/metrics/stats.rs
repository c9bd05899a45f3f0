use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const AD_MIN_SAMPLE: usize = 5;
pub const AD_VOXELS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdResult {
    /// Midrank k-sample statistic.
    pub statistic: f64,
    /// Statistic standardized by its finite-sample null mean and variance.
    pub standardized: f64,
    pub p_value: f64,
}

impl AdResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Null variance of the k-sample statistic for sample sizes `n`.
fn null_variance(n: &[usize]) -> f64 {
    let k = n.len() as f64;
    let big_n: usize = n.iter().sum();
    let nf = big_n as f64;
    let hh: f64 = n.iter().map(|&v| 1.0 / v as f64).sum();
    // h = Σ_{i<N} 1/i ; g = Σ_{i=1}^{N-2} Σ_{j=i+1}^{N-1} 1/((N-i) j)
    let h: f64 = (1..big_n).map(|i| 1.0 / i as f64).sum();
    let mut suffix = 0.0;
    let mut g = 0.0;
    for i in (1..=big_n.saturating_sub(2)).rev() {
        suffix += 1.0 / (i + 1) as f64;
        g += suffix / (nf - i as f64);
    }
    let a = (4.0 * g - 6.0) * (k - 1.0) + (10.0 - 6.0 * g) * hh;
    let b = (2.0 * g - 4.0) * k * k + 8.0 * h * k + (2.0 * g - 14.0 * h - 4.0) * hh - 8.0 * h + 4.0 * g - 6.0;
    let c = (6.0 * h + 2.0 * g - 2.0) * k * k + (4.0 * h - 4.0 * g + 6.0) * k + (2.0 * h - 6.0) * hh + 4.0 * h;
    let d = (2.0 * h + 6.0) * k * k - 4.0 * h * k;
    (a * nf.powi(3) + b * nf * nf + c * nf + d) / ((nf - 1.0) * (nf - 2.0) * (nf - 3.0))
}

/// Midrank k-sample Anderson–Darling statistic (ties allowed).
pub fn ad_statistic(samples: &[Vec<f64>]) -> Result<f64> {
    let mut pooled: Vec<f64> = samples.iter().flatten().copied().collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("non-finite sample value".into()));
    }
    pooled.sort_by(f64::total_cmp);
    let nf = pooled.len() as f64;
    let mut distinct: Vec<(f64, f64, f64)> = Vec::new(); // (value, l_j, B_aj)
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j < pooled.len() && pooled[j] == pooled[i] {
            j += 1;
        }
        let l = (j - i) as f64;
        distinct.push((pooled[i], l, i as f64 + l / 2.0));
        i = j;
    }
    let mut total = 0.0;
    for s in samples {
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        let ni = sorted.len() as f64;
        let mut inner = 0.0;
        let mut pos = 0usize;
        for &(z, l, ba) in &distinct {
            let start = pos;
            while pos < sorted.len() && sorted[pos] <= z {
                pos += 1;
            }
            let f = (pos - start) as f64;
            let ma = pos as f64 - f / 2.0;
            let denom = ba * (nf - ba) - nf * l / 4.0;
            if denom > 0.0 {
                inner += l / nf * (nf * ma - ba * ni).powi(2) / denom;
            }
        }
        total += inner / ni;
    }
    Ok(total * (nf - 1.0) / nf)
}

/// k-sample Anderson–Darling test. The standardized statistic is referred to
/// its asymptotic null law `Σ_j χ²_{k−1} / (j(j+1))`, evaluated by Imhof's
/// inversion formula.
pub fn ad_ksample(samples: &[Vec<f64>]) -> Result<AdResult> {
    if samples.len() < 2 {
        return Err(Error::EmptyInput(format!("need at least 2 samples, got {}", samples.len())));
    }
    if let Some(s) = samples.iter().find(|s| s.len() < AD_MIN_SAMPLE) {
        return Err(Error::EmptyInput(format!(
            "each sample needs at least {AD_MIN_SAMPLE} values, got {}",
            s.len()
        )));
    }
    let n: Vec<usize> = samples.iter().map(Vec::len).collect();
    let stat = ad_statistic(samples)?;
    let m = (samples.len() - 1) as f64;
    let t = (stat - m) / null_variance(&n).sqrt();
    Ok(AdResult {
        statistic: stat,
        standardized: t,
        p_value: ad_asymptotic_pvalue(t, samples.len() - 1),
    })
}

const IMHOF_TERMS: usize = 120;

/// `P(T ≥ t)` for the standardized asymptotic statistic with `m = k − 1`.
pub fn ad_asymptotic_pvalue(t: f64, m: usize) -> f64 {
    let mf = m as f64;
    let var = 2.0 * mf * (std::f64::consts::PI.powi(2) / 3.0 - 3.0);
    let x = mf + t * var.sqrt();
    if x <= 0.0 {
        return 1.0;
    }
    let lambdas: Vec<f64> = (1..=IMHOF_TERMS).map(|j| 1.0 / (j * (j + 1)) as f64).collect();
    // the truncated tail is replaced by its mean
    let x = x - mf / (IMHOF_TERMS + 1) as f64;
    let nu = mf;
    let integrand = |u: f64| -> f64 {
        if u == 0.0 {
            return 0.5 * (nu * lambdas.iter().sum::<f64>() - x);
        }
        let mut theta = -0.5 * x * u;
        let mut log_rho = 0.0;
        for &l in &lambdas {
            let lu = l * u;
            theta += 0.5 * nu * lu.atan();
            log_rho += 0.25 * nu * (lu * lu).ln_1p();
        }
        theta.sin() / (u * log_rho.exp())
    };
    let h = 0.01;
    let mut sum = integrand(0.0);
    let mut u = 0.0;
    let mut k = 0usize;
    loop {
        u += h;
        k += 1;
        let f = integrand(u);
        sum += if k % 2 == 1 { 4.0 * f } else { 2.0 * f };
        if k % 2 == 0 && k >= 200 {
            // envelope 1/(uρ) bounds the remaining contribution
            let mut log_rho = 0.0;
            for &l in &lambdas {
                log_rho += 0.25 * nu * ((l * u) * (l * u)).ln_1p();
            }
            if 1.0 / (u * log_rho.exp()) < 1e-9 || u > 2000.0 {
                sum -= f; // last point carries weight 1
                break;
            }
        }
    }
    let integral = sum * h / 3.0;
    (0.5 + integral / std::f64::consts::PI).clamp(0.0, 1.0)
}

/// Median of `n` voxels drawn without replacement (all voxels when the
/// volume is smaller).
pub fn subsample_median(v: &Volume, n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = v.data();
    let mut vals: Vec<f64> = if data.len() <= n {
        data.iter().map(|&x| x as f64).collect()
    } else {
        sample(&mut rng, data.len(), n).iter().map(|i| data[i] as f64).collect()
    };
    vals.sort_by(f64::total_cmp);
    let m = vals.len();
    if m % 2 == 1 {
        vals[m / 2]
    } else {
        0.5 * (vals[m / 2 - 1] + vals[m / 2])
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile bootstrap CI of `mean(after − before)` at level `1 − alpha`.
pub fn bootstrap_paired_ci(before: &[f64], after: &[f64], n_boot: usize, alpha: f64, seed: u64) -> Result<(f64, f64)> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch(before.len(), after.len()));
    }
    if before.len() < 2 {
        return Err(Error::EmptyInput("bootstrap needs at least 2 pairs".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) || n_boot == 0 {
        return Err(Error::Config(format!("invalid bootstrap setup: alpha {alpha}, n_boot {n_boot}")));
    }
    let d: Vec<f64> = after.iter().zip(before).map(|(a, b)| a - b).collect();
    if d.iter().all(|&v| v == d[0]) {
        return Ok((d[0], d[0]));
    }
    let n = d.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut means: Vec<f64> = (0..n_boot)
        .map(|_| (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&means, alpha / 2.0), quantile_sorted(&means, 1.0 - alpha / 2.0)))
}
