//! Synthetic brain-like phantoms, parametric scanner corruptions and
//! multi-scanner datasets with traveling subjects.
//!
//! Phantoms are smoothed random tissue blobs, not anatomical atlases.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::{gaussian_blur, save_volume, Volume};

/// Correlation length (voxels) of the field that shapes tissue blobs.
const BLOB_SIGMA_FRACTION: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_tissues: usize,
    pub tissue_means: Vec<f64>,
    /// Gaussian blur sigma in voxels applied after tissue labelling.
    pub smoothness: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            n_tissues: 3,
            tissue_means: vec![0.2, 0.5, 0.8],
            smoothness: 0.7,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("phantom shape {:?} has an empty axis", self.shape)));
        }
        if self.n_tissues < 2 || self.tissue_means.len() != self.n_tissues {
            return Err(Error::Config(format!(
                "need n_tissues >= 2 with one mean each, got {} and {} means",
                self.n_tissues,
                self.tissue_means.len()
            )));
        }
        if self.tissue_means.iter().any(|&m| !(m > 0.0 && m < 1.0)) {
            return Err(Error::Config("tissue means must lie in (0, 1)".into()));
        }
        if self.tissue_means.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("tissue means must be strictly increasing".into()));
        }
        if !(self.smoothness >= 0.0) || !self.smoothness.is_finite() {
            return Err(Error::Config(format!("smoothness {} must be >= 0", self.smoothness)));
        }
        Ok(())
    }

    /// Copy of this spec with the seed of one subject.
    pub fn for_subject(&self, subject: usize) -> Self {
        Self {
            seed: derive_seed(self.seed, subject as u64),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScannerEffect {
    pub gain: f64,
    /// Peak relative deviation of the multiplicative low-frequency field.
    pub bias_amplitude: f64,
    pub gamma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl ScannerEffect {
    pub fn identity() -> Self {
        Self {
            gain: 1.0,
            bias_amplitude: 0.0,
            gamma: 1.0,
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.gain == 1.0 && self.bias_amplitude == 0.0 && self.gamma == 1.0 && self.noise_sigma == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gain > 0.0
            && self.gamma > 0.0
            && self.bias_amplitude >= 0.0
            && self.noise_sigma >= 0.0
            && [self.gain, self.gamma, self.bias_amplitude, self.noise_sigma]
                .iter()
                .all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("invalid scanner effect {self:?}")));
        }
        Ok(())
    }

    /// Same effect with the noise stream of one subject.
    pub fn for_subject(&self, subject: usize) -> Self {
        Self {
            seed: derive_seed(self.seed, subject as u64),
            ..*self
        }
    }

    /// Three distinct desk-scale scanners.
    pub fn desk_defaults() -> Vec<ScannerEffect> {
        vec![
            ScannerEffect {
                gain: 1.0,
                bias_amplitude: 0.05,
                gamma: 0.75,
                noise_sigma: 0.01,
                seed: 11,
            },
            ScannerEffect {
                gain: 0.8,
                bias_amplitude: 0.1,
                gamma: 1.25,
                noise_sigma: 0.02,
                seed: 12,
            },
            ScannerEffect {
                gain: 1.1,
                bias_amplitude: 0.08,
                gamma: 1.6,
                noise_sigma: 0.015,
                seed: 13,
            },
        ]
    }
}

fn normal_field(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Volume {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Volume::new(shape, data).expect("finite normal draws")
}

/// Seed-deterministic tissue phantom with intensities in `[0, 1]`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let min_axis = *spec.shape.iter().min().unwrap() as f64;
    let field = gaussian_blur(&normal_field(spec.shape, &mut rng), (BLOB_SIGMA_FRACTION * min_axis).max(1.0));

    // equal-volume tissue classes from the field quantiles
    let mut sorted: Vec<f32> = field.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let thresholds: Vec<f32> = (1..spec.n_tissues)
        .map(|t| sorted[t * sorted.len() / spec.n_tissues])
        .collect();
    let labelled: Vec<f32> = field
        .data()
        .iter()
        .map(|&x| {
            let class = thresholds.partition_point(|&t| t <= x);
            spec.tissue_means[class] as f32
        })
        .collect();
    let v = Volume::new(spec.shape, labelled)?;
    let mut out = gaussian_blur(&v, spec.smoothness);
    out.refresh_normalized();
    Ok(out)
}

/// Coefficients of a random quadratic polynomial over `[-1, 1]³`.
fn bias_field(shape: [usize; 3], amplitude: f64, seed: u64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    if amplitude == 0.0 {
        return vec![1.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xB1A5));
    let coef: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
    let coord = |i: usize, len: usize| {
        if len == 1 {
            0.0
        } else {
            2.0 * i as f64 / (len - 1) as f64 - 1.0
        }
    };
    let mut poly = Vec::with_capacity(n);
    for i in 0..shape[0] {
        let x = coord(i, shape[0]);
        for j in 0..shape[1] {
            let y = coord(j, shape[1]);
            for k in 0..shape[2] {
                let z = coord(k, shape[2]);
                let terms = [x, y, z, x * y, x * z, y * z, x * x, y * y, z * z];
                poly.push(terms.iter().zip(&coef).map(|(t, c)| t * c).sum::<f64>());
            }
        }
    }
    let peak = poly.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    poly.into_iter().map(|p| 1.0 + scale * p).collect()
}

/// `clip(gain · field · v^gamma + noise, 0, 1)`.
pub fn apply_scanner_effect(v: &Volume, e: &ScannerEffect) -> Result<Volume> {
    e.validate()?;
    if e.is_identity() {
        return Ok(v.clone());
    }
    let field = bias_field(v.shape(), e.bias_amplitude, e.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
    let data = v
        .data()
        .iter()
        .zip(&field)
        .map(|(&x, &b)| {
            let noise = if e.noise_sigma > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                e.noise_sigma * z
            } else {
                0.0
            };
            let y = e.gain * b * (x.max(0.0) as f64).powf(e.gamma) + noise;
            y.clamp(0.0, 1.0) as f32
        })
        .collect();
    let mut out = Volume::new(v.shape(), data)?;
    out.meta = v.meta.clone();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub scanner_id: usize,
    pub subject_id: String,
    pub split: Split,
}

/// Dataset listing; relative paths resolve against `base_dir`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let entries = reader.deserialize().collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Self {
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Distinct scanner ids, sorted.
    pub fn scanners(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.entries.iter().map(|e| e.scanner_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Subject ids imaged under more than one scanner.
    pub fn traveling_subjects(&self) -> Vec<String> {
        let mut by_subject: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
        for e in &self.entries {
            by_subject.entry(&e.subject_id).or_default().push(e.scanner_id);
        }
        by_subject
            .into_iter()
            .filter(|(_, s)| {
                let mut s = s.clone();
                s.sort_unstable();
                s.dedup();
                s.len() > 1
            })
            .map(|(k, _)| k.to_string())
            .collect()
    }
}

/// One simulated image held in memory.
#[derive(Debug, Clone)]
pub struct Sample {
    pub volume: Volume,
    pub scanner_id: usize,
    pub subject: usize,
    pub split: Split,
}

pub fn subject_name(subject: usize) -> String {
    format!("sub{subject:03}")
}

/// Every subject phantom imaged under every scanner. The last `n_test`
/// subjects form the test split.
pub fn simulate(base: &PhantomSpec, effects: &[ScannerEffect], n_subjects: usize, n_test: usize) -> Result<Vec<Sample>> {
    if effects.len() < 2 {
        return Err(Error::Config(format!("need at least 2 scanner effects, got {}", effects.len())));
    }
    if n_subjects < 1 {
        return Err(Error::Config("n_subjects must be >= 1".into()));
    }
    if n_test > n_subjects {
        return Err(Error::Config(format!("n_test {n_test} exceeds n_subjects {n_subjects}")));
    }
    base.validate()?;
    let mut out = Vec::with_capacity(n_subjects * effects.len());
    for subject in 0..n_subjects {
        let phantom = generate_phantom(&base.for_subject(subject))?;
        let split = if subject >= n_subjects - n_test { Split::Test } else { Split::Train };
        for (s, e) in effects.iter().enumerate() {
            let volume = apply_scanner_effect(&phantom, &e.for_subject(subject))?
                .with_meta("scanner_id", s.to_string())
                .with_meta("subject_id", subject_name(subject));
            out.push(Sample {
                volume,
                scanner_id: s,
                subject,
                split,
            });
        }
    }
    Ok(out)
}

/// Writes a simulated dataset plus `manifest.csv` into `dir`.
pub fn make_dataset(
    base: &PhantomSpec,
    effects: &[ScannerEffect],
    n_subjects: usize,
    n_test: usize,
    dir: &Path,
) -> Result<Manifest> {
    let samples = simulate(base, effects, n_subjects, n_test)?;
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in &samples {
        let name = format!("scanner{}_{}.raw", s.scanner_id, subject_name(s.subject));
        save_volume(&s.volume, &dir.join(&name))?;
        entries.push(ManifestEntry {
            path: name,
            scanner_id: s.scanner_id,
            subject_id: subject_name(s.subject),
            split: s.split,
        });
    }
    let manifest = Manifest {
        entries,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.csv"))?;
    Ok(manifest)
}
