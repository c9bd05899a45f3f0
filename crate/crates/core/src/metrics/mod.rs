//! Image and distribution similarity metrics and the hypothesis tests used
//! to compare scanner groups.

mod distribution;
mod evaluation;
mod fid;
mod lpips;
mod report;
mod ssim;
mod stats;

pub use distribution::{hellinger, intensity_distribution, jsd, wasserstein1, IntensityDistribution, DEFAULT_BINS};
pub use evaluation::{evaluate_harmonization, Delta, EvalConfig, EvaluationReport, PairSsim, Scan, TravelingReport};
pub use fid::{fid, FeatureSet, FID_REGULARIZATION};
pub use lpips::{central_slices, lpips, lpips_features, FeatureExtractor, FeatureMap, ToyExtractor};
pub use report::{mean_sd, pairwise_report, MetricSummary, PairValue, PairwiseReport};
pub use ssim::{ssim_2d, ssim_pair, C1, C2, C3};
pub use stats::{
    ad_asymptotic_pvalue, ad_ksample, ad_statistic, bootstrap_paired_ci, quantile_sorted, subsample_median,
    AdResult, AD_MIN_SAMPLE, AD_VOXELS,
};
