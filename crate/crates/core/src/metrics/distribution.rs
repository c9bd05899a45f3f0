use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_BINS: usize = 128;

/// Normalized intensity histogram on shared bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntensityDistribution {
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub n_source_images: usize,
}

impl IntensityDistribution {
    /// Builds a distribution from explicit edges and probabilities.
    pub fn from_probs(bin_edges: Vec<f64>, probabilities: Vec<f64>) -> Result<Self> {
        if bin_edges.len() != probabilities.len() + 1 {
            return Err(Error::LengthMismatch(bin_edges.len(), probabilities.len() + 1));
        }
        if bin_edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("bin edges must be strictly increasing".into()));
        }
        if probabilities.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Domain("probabilities must be non-negative".into()));
        }
        let s: f64 = probabilities.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {s}")));
        }
        Ok(Self {
            bin_edges,
            probabilities,
            n_source_images: 0,
        })
    }

    /// Uniform edges on `[0, 1]`.
    pub fn uniform_edges(n_bins: usize) -> Vec<f64> {
        (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        self.bin_edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn n_bins(&self) -> usize {
        self.probabilities.len()
    }
}

pub(crate) fn check_shared(p: &IntensityDistribution, q: &IntensityDistribution) -> Result<()> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::Domain(format!(
            "distributions use different bins ({} vs {})",
            p.n_bins(),
            q.n_bins()
        )));
    }
    Ok(())
}

/// Index of the uniform `[0, 1]` bin holding `v`; the top edge belongs to
/// the last bin.
#[inline]
pub(crate) fn bin_of(v: f32, n_bins: usize) -> usize {
    ((v as f64 * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1)
}

/// Per-image normalized histograms averaged over the images.
pub fn intensity_distribution(volumes: &[&Volume], n_bins: usize) -> Result<IntensityDistribution> {
    if volumes.is_empty() {
        return Err(Error::EmptyInput("no volumes for the intensity distribution".into()));
    }
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let mut probs = vec![0.0f64; n_bins];
    for v in volumes {
        let mut counts = vec![0u64; n_bins];
        for &x in v.data() {
            counts[bin_of(x, n_bins)] += 1;
        }
        let n = v.len() as f64;
        for (p, c) in probs.iter_mut().zip(counts) {
            *p += c as f64 / n;
        }
    }
    let k = volumes.len() as f64;
    probs.iter_mut().for_each(|p| *p /= k);
    Ok(IntensityDistribution {
        bin_edges: IntensityDistribution::uniform_edges(n_bins),
        probabilities: probs,
        n_source_images: volumes.len(),
    })
}

fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// Jensen–Shannon divergence, natural log.
pub fn jsd(p: &IntensityDistribution, q: &IntensityDistribution) -> Result<f64> {
    check_shared(p, q)?;
    let v: f64 = p
        .probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(&a, &b)| {
            let m = 0.5 * (a + b);
            0.5 * xlogy(a, m) + 0.5 * xlogy(b, m)
        })
        .sum();
    Ok(v.clamp(0.0, std::f64::consts::LN_2))
}

pub fn hellinger(p: &IntensityDistribution, q: &IntensityDistribution) -> Result<f64> {
    check_shared(p, q)?;
    let s: f64 = p
        .probabilities
        .iter()
        .zip(&q.probabilities)
        .map(|(&a, &b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((s.sqrt() / std::f64::consts::SQRT_2).min(1.0))
}

/// `∫ |F_P − F_Q| dx` with each bin's mass placed at its centre.
pub fn wasserstein1(p: &IntensityDistribution, q: &IntensityDistribution) -> Result<f64> {
    check_shared(p, q)?;
    let c = p.centers();
    let mut fp = 0.0;
    let mut fq = 0.0;
    let mut total = 0.0;
    for i in 0..c.len().saturating_sub(1) {
        fp += p.probabilities[i];
        fq += q.probabilities[i];
        total += (fp - fq).abs() * (c[i + 1] - c[i]);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_bin(p: [f64; 2]) -> IntensityDistribution {
        IntensityDistribution::from_probs(vec![0.0, 0.5, 1.0], p.to_vec()).unwrap()
    }

    fn random_dist(rng: &mut impl Rng, n: usize, edges: &[f64]) -> IntensityDistribution {
        let mut p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        // sprinkle empty bins
        for _ in 0..n / 4 {
            let i = rng.random_range(0..n);
            p[i] = 0.0;
        }
        p[0] += 1e-3;
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        IntensityDistribution::from_probs(edges.to_vec(), p).unwrap()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn constant_volume_fills_one_bin() {
        let v = Volume::filled([3, 3, 3], 0.5);
        let d = intensity_distribution(&[&v], 10).unwrap();
        assert_eq!(d.probabilities[5], 1.0);
        assert_eq!(d.probabilities.iter().sum::<f64>(), 1.0);
        let two = intensity_distribution(&[&v, &v], 10).unwrap();
        assert_eq!(two.probabilities, d.probabilities);
        assert!(matches!(intensity_distribution(&[], 10), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn averaged_histogram_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vols: Vec<Volume> = (0..3)
            .map(|s| Volume::from_fn([4 + s, 5, 6], |_, _, _| rng.random::<f32>()).unwrap())
            .collect();
        let refs: Vec<&Volume> = vols.iter().collect();
        let d = intensity_distribution(&refs, 16).unwrap();
        let mut oracle = vec![0.0; 16];
        for v in &vols {
            for b in 0..16 {
                let lo = b as f32 / 16.0;
                let hi = (b + 1) as f32 / 16.0;
                let count = v.data().iter().filter(|&&x| x >= lo && (x < hi || (b == 15 && x <= hi))).count();
                oracle[b] += count as f64 / v.len() as f64 / 3.0;
            }
        }
        for (a, b) in d.probabilities.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn jsd_values() {
        let p = two_bin([1.0, 0.0]);
        let q = two_bin([0.0, 1.0]);
        assert!((jsd(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!((jsd(&p, &q).unwrap() - 0.6931).abs() < 1e-4);
        assert_eq!(jsd(&p, &p).unwrap(), 0.0);
        let a = two_bin([0.5, 0.5]);
        let b = two_bin([0.25, 0.75]);
        let m = [0.375, 0.625];
        let oracle = 0.5 * (0.5 * (0.5f64 / m[0]).ln() + 0.5 * (0.5f64 / m[1]).ln())
            + 0.5 * (0.25 * (0.25f64 / m[0]).ln() + 0.75 * (0.75f64 / m[1]).ln());
        assert!(rel(jsd(&a, &b).unwrap(), oracle) < 1e-12);
        let other = IntensityDistribution::from_probs(vec![0.0, 0.4, 1.0], vec![0.5, 0.5]).unwrap();
        assert!(jsd(&a, &other).is_err());
    }

    #[test]
    fn hellinger_values() {
        let p = two_bin([1.0, 0.0]);
        let q = two_bin([0.0, 1.0]);
        assert!((hellinger(&p, &q).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(hellinger(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_values() {
        let edges = IntensityDistribution::uniform_edges(10);
        let point = |bin: usize| {
            let mut p = vec![0.0; 10];
            p[bin] = 1.0;
            IntensityDistribution::from_probs(edges.clone(), p).unwrap()
        };
        assert_eq!(wasserstein1(&point(2), &point(2)).unwrap(), 0.0);
        assert!((wasserstein1(&point(2), &point(5)).unwrap() - 0.3).abs() < 1e-12);
    }

    /// Oracle for the distance: integrate the two step CDFs on a fine grid
    /// by the trapezoid rule.
    fn wd_oracle(p: &IntensityDistribution, q: &IntensityDistribution) -> f64 {
        let c = p.centers();
        let cdf = |d: &IntensityDistribution, x: f64| -> f64 {
            c.iter().zip(&d.probabilities).filter(|(ci, _)| **ci <= x).map(|(_, pi)| pi).sum()
        };
        let mut total = 0.0;
        for w in c.windows(2) {
            // both CDFs are constant on [c_i, c_{i+1}), so the trapezoid on
            // interior points is exact
            let sub = 8;
            let h = (w[1] - w[0]) / sub as f64;
            for s in 0..sub {
                let a = w[0] + s as f64 * h + 1e-12;
                let b = w[0] + (s + 1) as f64 * h - 1e-12;
                let fa = (cdf(p, a) - cdf(q, a)).abs();
                let fb = (cdf(p, b) - cdf(q, b)).abs();
                total += 0.5 * (fa + fb) * h;
            }
        }
        total
    }

    #[test]
    fn divergences_match_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..100 {
            let n = 2 + trial % 30;
            let edges = IntensityDistribution::uniform_edges(n);
            let p = random_dist(&mut rng, n, &edges);
            let q = random_dist(&mut rng, n, &edges);
            let mut j = 0.0;
            let mut h = 0.0;
            for i in 0..n {
                let (a, b) = (p.probabilities[i], q.probabilities[i]);
                let m = (a + b) / 2.0;
                if a > 0.0 {
                    j += 0.5 * a * (a / m).ln();
                }
                if b > 0.0 {
                    j += 0.5 * b * (b / m).ln();
                }
                h += (a.sqrt() - b.sqrt()) * (a.sqrt() - b.sqrt());
            }
            let h = (h / 2.0).sqrt();
            assert!(rel(jsd(&p, &q).unwrap(), j) <= 1e-6);
            assert!(rel(hellinger(&p, &q).unwrap(), h) <= 1e-6);
            assert!(rel(wasserstein1(&p, &q).unwrap(), wd_oracle(&p, &q)) <= 1e-6);
        }
    }

    #[test]
    fn metric_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges = IntensityDistribution::uniform_edges(12);
        for _ in 0..200 {
            let p = random_dist(&mut rng, 12, &edges);
            let q = random_dist(&mut rng, 12, &edges);
            let r = random_dist(&mut rng, 12, &edges);
            assert_eq!(jsd(&p, &q).unwrap(), jsd(&q, &p).unwrap());
            assert_eq!(hellinger(&p, &q).unwrap(), hellinger(&q, &p).unwrap());
            assert!(jsd(&p, &q).unwrap() <= 2f64.ln());
            assert!(hellinger(&p, &q).unwrap() <= 1.0);
            assert!(jsd(&p, &q).unwrap() > 0.0);
            let (pq, qr, pr) = (
                wasserstein1(&p, &q).unwrap(),
                wasserstein1(&q, &r).unwrap(),
                wasserstein1(&p, &r).unwrap(),
            );
            assert!(pr <= pq + qr + 1e-12);
        }
    }
}
