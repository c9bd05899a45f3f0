//! Pipeline configuration file (TOML). Every section is optional; missing
//! keys take their defaults and unknown keys are rejected.

use std::path::Path;

use anyhow::{Context, Result};
use disarm_core::analysis::ClassifierConfig;
use disarm_core::engine::TrainConfig;
use disarm_core::phantom::{PhantomSpec, ScannerEffect};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "DISARM_SEED";
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; the `--seed` flag wins, then this, then `DISARM_SEED`.
    pub seed: Option<u64>,
    pub phantom: PhantomConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub metrics: MetricsConfig,
    pub analysis: AnalysisConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            phantom: PhantomConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            metrics: MetricsConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub spec: PhantomSpec,
    pub scanners: Vec<ScannerEffect>,
    pub n_subjects: usize,
    /// The last `n_test` subjects of every scanner form the test split.
    pub n_test: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            spec: PhantomSpec::default(),
            scanners: ScannerEffect::desk_defaults(),
            n_subjects: 20,
            n_test: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ScannerFree,
    Reference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub mode: Mode,
    pub reference: Option<usize>,
    /// Window stride at inference; `None` uses disjoint windows.
    pub stride: Option<usize>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            mode: Mode::ScannerFree,
            reference: None,
            stride: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub n_bins: usize,
    pub ad_voxels: usize,
    pub n_boot: usize,
    pub alpha: f64,
    pub lpips_slices: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            n_bins: disarm_core::metrics::DEFAULT_BINS,
            ad_voxels: disarm_core::metrics::AD_VOXELS,
            n_boot: 2000,
            alpha: 0.05,
            lpips_slices: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub k_folds: usize,
    pub var_target: f64,
    pub age_column: String,
    pub group_column: String,
    pub label_column: String,
    /// `true` fits volume ~ age; `false` fits age ~ volume.
    pub volume_on_age: bool,
    pub classifier: ClassifierConfig,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k_folds: 10,
            var_target: 0.70,
            age_column: "age".into(),
            group_column: "scanner_id".into(),
            label_column: "diagnosis".into(),
            volume_on_age: true,
            classifier: ClassifierConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }

    /// Fixes the seed from flag, file or environment, and propagates it.
    pub fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match (flag, self.seed) {
            (Some(s), _) | (None, Some(s)) => s,
            (None, None) => match std::env::var(SEED_ENV) {
                Ok(v) => v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        self.train.model.seed = seed;
        self.phantom.spec.seed = seed;
        self.analysis.classifier.seed = seed;
        Ok(seed)
    }

    /// Writes the resolved configuration next to a command's outputs.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG), toml::to_string_pretty(self)?)?;
        Ok(())
    }
}
