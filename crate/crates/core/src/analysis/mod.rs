//! Downstream statistics on harmonized data: age regression with
//! cross-validation, random-intercept mixed models, PCA with logistic AUC,
//! and a small CNN classifier harness.

mod classifier;
mod lm;
mod lmm;
mod logistic;
mod pca;
mod table;

pub use classifier::{train_toy_classifier, ClassifierConfig, ClassifierReport, Confusion};
pub use lm::{fit_age_lm_cv, ols, CvSummary, OlsFit, RIDGE_FALLBACK};
pub use lmm::{fit_lmm, icc, LmmFit};
pub use logistic::{auc, fit_logistic, fit_logistic_auc, LogisticFit, LOGISTIC_L2};
pub use pca::{pca_reduce, Pca};
pub use table::FeatureTable;

use serde::{Deserialize, Serialize};

/// Mean and population standard deviation of per-fold values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, sd) = crate::metrics::mean_sd(values);
        Self { mean, sd }
    }
}
