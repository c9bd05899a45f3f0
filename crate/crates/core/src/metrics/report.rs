use serde::{Deserialize, Serialize};

use super::distribution::{hellinger, jsd, wasserstein1, IntensityDistribution};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub a: String,
    pub b: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub pairs: Vec<PairValue>,
    pub mean: f64,
    /// Population standard deviation over the pairs.
    pub sd: f64,
    /// Symmetric `G × G` matrix with a zero diagonal.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub labels: Vec<String>,
    pub jsd: MetricSummary,
    pub hd: MetricSummary,
    pub wd: MetricSummary,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    let v = values.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn summarize(
    labelled: &[(String, IntensityDistribution)],
    f: fn(&IntensityDistribution, &IntensityDistribution) -> Result<f64>,
) -> Result<MetricSummary> {
    let g = labelled.len();
    let mut matrix = vec![vec![0.0; g]; g];
    let mut pairs = Vec::with_capacity(g * (g - 1) / 2);
    for i in 0..g {
        for j in i + 1..g {
            let v = f(&labelled[i].1, &labelled[j].1)?;
            matrix[i][j] = v;
            matrix[j][i] = v;
            pairs.push(PairValue {
                a: labelled[i].0.clone(),
                b: labelled[j].0.clone(),
                value: v,
            });
        }
    }
    let values: Vec<f64> = pairs.iter().map(|p| p.value).collect();
    let (mean, sd) = mean_sd(&values);
    Ok(MetricSummary { pairs, mean, sd, matrix })
}

/// All pairwise JSD, Hellinger and Wasserstein-1 values between labelled
/// distributions.
pub fn pairwise_report(labelled: &[(String, IntensityDistribution)]) -> Result<PairwiseReport> {
    if labelled.len() < 2 {
        return Err(Error::EmptyInput(format!("need at least 2 distributions, got {}", labelled.len())));
    }
    Ok(PairwiseReport {
        labels: labelled.iter().map(|(l, _)| l.clone()).collect(),
        jsd: summarize(labelled, jsd)?,
        hd: summarize(labelled, hellinger)?,
        wd: summarize(labelled, wasserstein1)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(p: &[f64]) -> IntensityDistribution {
        IntensityDistribution::from_probs(IntensityDistribution::uniform_edges(p.len()), p.to_vec()).unwrap()
    }

    #[test]
    fn pair_counts() {
        let two: Vec<_> = (0..2).map(|i| (format!("s{i}"), dist(&[0.5, 0.5]))).collect();
        assert_eq!(pairwise_report(&two).unwrap().jsd.pairs.len(), 1);
        let ten: Vec<_> = (0..10)
            .map(|i| {
                let a = 0.05 + 0.09 * i as f64;
                (format!("s{i}"), dist(&[a, 1.0 - a]))
            })
            .collect();
        let r = pairwise_report(&ten).unwrap();
        assert_eq!(r.jsd.pairs.len(), 45);
        assert_eq!(r.wd.matrix.len(), 10);
        assert_eq!(r.hd.matrix[3][7], r.hd.matrix[7][3]);
        assert!(pairwise_report(&ten[..1]).is_err());
    }

    #[test]
    fn identical_distributions_summarize_to_zero() {
        let same: Vec<_> = (0..4).map(|i| (format!("s{i}"), dist(&[0.2, 0.3, 0.5]))).collect();
        let r = pairwise_report(&same).unwrap();
        for m in [&r.jsd, &r.hd, &r.wd] {
            assert_eq!((m.mean, m.sd), (0.0, 0.0));
        }
        let json = serde_json::to_string(&r).unwrap();
        let back: PairwiseReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }
}
