use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::distribution::{intensity_distribution, jsd, IntensityDistribution};
use super::report::{mean_sd, pairwise_report, PairwiseReport};
use super::ssim::ssim_pair;
use super::stats::{ad_ksample, bootstrap_paired_ci, subsample_median, AdResult, AD_MIN_SAMPLE};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::Volume;

/// One image with its acquisition identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    pub scanner_id: usize,
    pub subject_id: String,
    pub volume: Volume,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_bins: usize,
    pub ad_voxels: usize,
    pub n_boot: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_bins: super::DEFAULT_BINS,
            ad_voxels: super::AD_VOXELS,
            n_boot: 2000,
            alpha: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub mean_before: f64,
    pub mean_after: f64,
    /// Percentile CI of `mean(after − before)`; absent with fewer than two
    /// paired values.
    pub ci: Option<(f64, f64)>,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSsim {
    pub scanner_id: usize,
    pub subject_id: String,
    pub ssim: f64,
    pub struct_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TravelingReport {
    pub n_subjects: usize,
    pub n_pairs: usize,
    pub ssim: Delta,
    pub jsd: Delta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub scanners: Vec<usize>,
    pub before: PairwiseReport,
    pub after: PairwiseReport,
    pub distributions_before: Vec<IntensityDistribution>,
    pub distributions_after: Vec<IntensityDistribution>,
    pub ad_before: Option<AdResult>,
    pub ad_after: Option<AdResult>,
    pub jsd: Delta,
    pub hd: Delta,
    pub wd: Delta,
    pub pairs: Vec<PairSsim>,
    pub struct_ssim_mean: f64,
    pub struct_ssim_min: f64,
    pub traveling: Option<TravelingReport>,
}

fn delta(before: &[f64], after: &[f64], cfg: &EvalConfig, stream: u64) -> Result<Delta> {
    let ci = if before.len() >= 2 {
        Some(bootstrap_paired_ci(before, after, cfg.n_boot, cfg.alpha, derive_seed(cfg.seed, stream))?)
    } else {
        None
    };
    Ok(Delta {
        mean_before: mean_sd(before).0,
        mean_after: mean_sd(after).0,
        ci,
        significant: ci.is_some_and(|(lo, hi)| lo > 0.0 || hi < 0.0),
    })
}

fn group(scans: &[Scan]) -> BTreeMap<usize, Vec<&Scan>> {
    let mut m: BTreeMap<usize, Vec<&Scan>> = BTreeMap::new();
    for s in scans {
        m.entry(s.scanner_id).or_default().push(s);
    }
    m
}

fn per_image_medians(groups: &BTreeMap<usize, Vec<&Scan>>, cfg: &EvalConfig) -> Vec<Vec<f64>> {
    groups
        .values()
        .map(|g| {
            g.iter()
                .enumerate()
                .map(|(i, s)| subsample_median(&s.volume, cfg.ad_voxels, derive_seed(cfg.seed, i as u64)))
                .collect()
        })
        .collect()
}

/// Compares scanner groups before and after harmonization. Scans are paired
/// by `(scanner_id, subject_id)`; subjects seen under several scanners form
/// the traveling-subject comparison.
pub fn evaluate_harmonization(before: &[Scan], after: &[Scan], cfg: &EvalConfig) -> Result<EvaluationReport> {
    let gb = group(before);
    let ga = group(after);
    let sb: Vec<usize> = gb.keys().copied().collect();
    let sa: Vec<usize> = ga.keys().copied().collect();
    if sb != sa {
        return Err(Error::Config(format!("scanner sets differ: before {sb:?}, after {sa:?}")));
    }
    if sb.len() < 2 {
        return Err(Error::EmptyInput(format!("need at least 2 scanners, got {}", sb.len())));
    }
    let dists = |g: &BTreeMap<usize, Vec<&Scan>>| -> Result<Vec<IntensityDistribution>> {
        g.values()
            .map(|v| intensity_distribution(&v.iter().map(|s| &s.volume).collect::<Vec<_>>(), cfg.n_bins))
            .collect()
    };
    let db = dists(&gb)?;
    let da = dists(&ga)?;
    let label = |d: &[IntensityDistribution]| -> Vec<(String, IntensityDistribution)> {
        sb.iter().zip(d).map(|(s, d)| (format!("scanner{s}"), d.clone())).collect()
    };
    let rb = pairwise_report(&label(&db))?;
    let ra = pairwise_report(&label(&da))?;
    let vals = |m: &super::MetricSummary| m.pairs.iter().map(|p| p.value).collect::<Vec<_>>();

    let ad = |g: &BTreeMap<usize, Vec<&Scan>>| -> Result<Option<AdResult>> {
        if g.values().any(|v| v.len() < AD_MIN_SAMPLE) {
            return Ok(None);
        }
        Ok(Some(ad_ksample(&per_image_medians(g, cfg))?))
    };

    let index: BTreeMap<(usize, &str), &Scan> = before.iter().map(|s| ((s.scanner_id, s.subject_id.as_str()), s)).collect();
    let mut pairs = Vec::with_capacity(after.len());
    for s in after {
        let b = index.get(&(s.scanner_id, s.subject_id.as_str())).ok_or_else(|| {
            Error::Lookup(format!("no input scan for scanner {} subject {}", s.scanner_id, s.subject_id))
        })?;
        let (ssim, struct_ssim) = ssim_pair(&b.volume, &s.volume)?;
        pairs.push(PairSsim {
            scanner_id: s.scanner_id,
            subject_id: s.subject_id.clone(),
            ssim,
            struct_ssim,
        });
    }
    let ss: Vec<f64> = pairs.iter().map(|p| p.struct_ssim).collect();

    Ok(EvaluationReport {
        scanners: sb,
        jsd: delta(&vals(&rb.jsd), &vals(&ra.jsd), cfg, 1)?,
        hd: delta(&vals(&rb.hd), &vals(&ra.hd), cfg, 2)?,
        wd: delta(&vals(&rb.wd), &vals(&ra.wd), cfg, 3)?,
        before: rb,
        after: ra,
        distributions_before: db,
        distributions_after: da,
        ad_before: ad(&gb)?,
        ad_after: ad(&ga)?,
        struct_ssim_mean: mean_sd(&ss).0,
        struct_ssim_min: ss.iter().copied().fold(f64::INFINITY, f64::min),
        pairs,
        traveling: traveling(before, after, cfg)?,
    })
}

fn traveling(before: &[Scan], after: &[Scan], cfg: &EvalConfig) -> Result<Option<TravelingReport>> {
    let key = |s: &Scan| (s.subject_id.clone(), s.scanner_id);
    let b: BTreeMap<_, &Scan> = before.iter().map(|s| (key(s), s)).collect();
    let a: BTreeMap<_, &Scan> = after.iter().map(|s| (key(s), s)).collect();
    let mut by_subject: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for k in a.keys().filter(|k| b.contains_key(*k)) {
        by_subject.entry(k.0.clone()).or_default().insert(k.1);
    }
    by_subject.retain(|_, s| s.len() >= 2);
    if by_subject.is_empty() {
        return Ok(None);
    }
    let hist = |v: &Volume| intensity_distribution(&[v], cfg.n_bins);
    let (mut sp, mut sq, mut jp, mut jq) = (vec![], vec![], vec![], vec![]);
    for (subject, scanners) in &by_subject {
        let list: Vec<usize> = scanners.iter().copied().collect();
        for i in 0..list.len() {
            for j in i + 1..list.len() {
                let (ki, kj) = ((subject.clone(), list[i]), (subject.clone(), list[j]));
                let (bi, bj, ai, aj) = (&b[&ki].volume, &b[&kj].volume, &a[&ki].volume, &a[&kj].volume);
                sp.push(ssim_pair(bi, bj)?.0);
                sq.push(ssim_pair(ai, aj)?.0);
                jp.push(jsd(&hist(bi)?, &hist(bj)?)?);
                jq.push(jsd(&hist(ai)?, &hist(aj)?)?);
            }
        }
    }
    Ok(Some(TravelingReport {
        n_subjects: by_subject.len(),
        n_pairs: sp.len(),
        ssim: delta(&sp, &sq, cfg, 4)?,
        jsd: delta(&jp, &jq, cfg, 5)?,
    }))
}
