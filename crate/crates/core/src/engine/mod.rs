//! Adversarial training loop and the two inference modes (scanner-free and
//! reference-scanner harmonization).

mod augment;
mod state;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use augment::{displacement_field, elastic_augment};
pub use state::TrainState;

use crate::error::{Error, Result};
use crate::model::{
    is_discriminator_param, labels_tensor, volumes_to_tensor, ModelBundle, ModelConfig, Net, ScannerLabel,
    DISCRIMINATOR_PREFIXES,
};
use crate::nn::{AdamConfig, Graph, Tensor, Var};
use crate::objective::{self, LossReport, LossWeights};
use crate::phantom::{Manifest, Split};
use crate::seed::derive_seed;
use crate::volume::{load_volume, merge_windows, split_windows, Volume, WindowPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Windows per scanner domain in each step.
    pub batch_size: usize,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub window: WindowPlan,
    pub augment: bool,
    /// Largest elastic displacement in voxels when augmenting.
    pub augment_magnitude: f64,
    /// Save a checkpoint every this many iterations (0 disables).
    pub checkpoint_every: u64,
    /// Training images per scanner averaged into the reference bank.
    pub reference_images: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_size: 1,
            lr_generator: 1e-4,
            lr_discriminator: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            weights: LossWeights::default(),
            seed: 0,
            window: WindowPlan::new(8, 8),
            augment: false,
            augment_magnitude: 1.0,
            checkpoint_every: 0,
            reference_images: 5,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        for lr in [self.lr_generator, self.lr_discriminator] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate {lr} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.augment_magnitude < 0.0 {
            return Err(Error::Config("augment_magnitude must be >= 0".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Tensor::from_vec(shape, data)
}

fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Seed tensor `weight * grad` for a node of shape `shape`.
fn seed(shape: &[usize], grad: &[f64], weight: f64) -> Tensor<f32> {
    Tensor::from_vec(shape, grad.iter().map(|&g| (weight * g) as f32).collect())
}

/// Probabilities of the true class for each row, and a scatter back.
/// Probability of the true scanner renormalized over the two scanners of
/// the step, so `0.5` means the pair is indistinguishable.
fn pair_prob(probs: &Tensor<f32>, labels: &[usize], others: &[usize]) -> Vec<f64> {
    let k = probs.shape()[1];
    let d = probs.data();
    labels
        .iter()
        .zip(others)
        .enumerate()
        .map(|(i, (&c, &o))| {
            let (pc, po) = (d[i * k + c] as f64, d[i * k + o] as f64);
            pc / (pc + po)
        })
        .collect()
}

/// Seed for the probability vector from gradients w.r.t. [`pair_prob`].
fn scatter_pair(probs: &Tensor<f32>, labels: &[usize], others: &[usize], grads: &[f64], weight: f64) -> Tensor<f32> {
    let shape = probs.shape();
    let k = shape[1];
    let d = probs.data();
    let mut t = Tensor::zeros(shape);
    for (i, ((&c, &o), &g)) in labels.iter().zip(others).zip(grads).enumerate() {
        let (pc, po) = (d[i * k + c] as f64, d[i * k + o] as f64);
        let s2 = (pc + po) * (pc + po);
        t.data_mut()[i * k + c] = (weight * g * po / s2) as f32;
        t.data_mut()[i * k + o] = (-weight * g * pc / s2) as f32;
    }
    t
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn check_finite(iteration: u64, what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            report: format!("{what}: {values:?}"),
        })
    }
}

/// One discriminator update followed by one encoder/generator update on a
/// window batch from scanner `c_k` and one from scanner `c_h`.
pub fn train_step(
    state: &mut TrainState,
    batch_k: &[&Volume],
    c_k: usize,
    batch_h: &[&Volume],
    c_h: usize,
) -> Result<LossReport> {
    let cfg = state.config.model.clone();
    let w = state.config.weights;
    if c_k == c_h {
        return Err(Error::Config(format!("train_step needs two different scanners, got {c_k} twice")));
    }
    if batch_k.is_empty() || batch_k.len() != batch_h.len() {
        return Err(Error::LengthMismatch(batch_k.len(), batch_h.len()));
    }
    let n_sc = cfg.n_scanners;
    let b = batch_k.len();
    let n = 2 * b;
    let iteration = state.bundle.iteration + 1;
    for v in batch_k.iter().chain(batch_h) {
        if v.shape() != cfg.input_shape {
            return Err(Error::shape(&cfg.input_shape, &v.shape()));
        }
    }
    let domain = |c: usize| ScannerLabel::domain(c, n_sc);
    let (lk, lh, l0) = (domain(c_k)?, domain(c_h)?, ScannerLabel::null(n_sc));
    let label_refs: Vec<&ScannerLabel> = (0..n).map(|i| if i < b { &lk } else { &lh }).collect();
    let labels = labels_tensor::<f32>(&label_refs);
    let nulls = labels_tensor::<f32>(&vec![&l0; n]);
    let classes: Vec<usize> = (0..n).map(|i| if i < b { c_k } else { c_h }).collect();
    let others: Vec<usize> = (0..n).map(|i| if i < b { c_h } else { c_k }).collect();
    let swap: Vec<usize> = (0..n).map(|i| (i + b) % n).collect();
    let s = cfg.style_dim;
    let spatial = cfg.tensor_spatial();

    let all: Vec<&Volume> = batch_k.iter().chain(batch_h).copied().collect();
    let x_t = volumes_to_tensor::<f32>(&all);
    let eps1 = normal_tensor(&mut state.rng, &[n, s]);
    let eps2 = normal_tensor(&mut state.rng, &[n, s]);
    let shared = normal_tensor(&mut state.rng, &[1, s]);
    let eps_sf = Tensor::from_vec(&[n, s], shared.data().repeat(n));

    // encoder/generator forward graph; discriminators enter later as constants
    let mut g = Graph::<f32>::new();
    let (x, zb, post, x_sw, x_cyc, x_self, post_f);
    {
        let net = Net::new(&cfg, &state.bundle.params).frozen(&DISCRIMINATOR_PREFIXES);
        x = g.constant(x_t.clone());
        zb = net.encode_brain(&mut g, x);
        post = net.encode_scanner(&mut g, x, &labels, &eps1);
        let zb_sw = g.permute_batch(zb, &swap);
        x_sw = net.generate(&mut g, zb_sw, post.z, &labels, spatial);
        let zb2 = net.encode_brain(&mut g, x_sw);
        let post2 = net.encode_scanner(&mut g, x_sw, &labels, &eps2);
        let zb2_sw = g.permute_batch(zb2, &swap);
        x_cyc = net.generate(&mut g, zb2_sw, post2.z, &labels, spatial);
        x_self = net.generate(&mut g, zb, post.z, &labels, spatial);
        let zf = g.constant(eps_sf);
        let x_f = net.generate(&mut g, zb, zf, &nulls, spatial);
        post_f = net.encode_scanner(&mut g, x_f, &nulls, &Tensor::zeros(&[n, s]));
    }

    for (what, v) in [("brain embedding", zb), ("swapped images", x_sw), ("cycle images", x_cyc), ("self images", x_self)] {
        if !g.value(v).all_finite() {
            return Err(Error::NonFinite {
                iteration,
                report: format!("{what} contain non-finite values"),
            });
        }
    }

    // discriminator step on detached embeddings and images
    let (adv_s_report, d_report) = {
        let mut gd = Graph::<f32>::new();
        let net = Net::new(&cfg, &state.bundle.params);
        let zb_d = gd.constant(g.value(zb).clone());
        let real = gd.constant(x_t.clone());
        let fake = gd.constant(g.value(x_sw).clone());
        let pb = net.discriminate_brain(&mut gd, zb_d);
        let (s_real, cls_real) = net.discriminate_scanner(&mut gd, real);
        let (s_fake, _) = net.discriminate_scanner(&mut gd, fake);

        let pb_rows = rows(gd.value(pb));
        let pb_refs: Vec<&[f64]> = pb_rows.iter().map(Vec::as_slice).collect();
        let ce_b = objective::scanner_classification_loss(&pb_refs, &classes)?;
        let cls_rows = rows(gd.value(cls_real));
        let cls_refs: Vec<&[f64]> = cls_rows.iter().map(Vec::as_slice).collect();
        let ce_s = objective::scanner_classification_loss(&cls_refs, &classes)?;
        let sr = to_f64(gd.value(s_real));
        let sf = to_f64(gd.value(s_fake));
        let adv = objective::scanner_adversarial_loss(&sr[..b], &sf[..b], &sr[b..], &sf[b..])?;
        check_finite(iteration, "discriminator losses", &[ce_b.value, ce_s.value, adv.value])?;

        let nb = n as f64;
        let flat = |gs: &[Vec<f64>]| gs.iter().flatten().copied().collect::<Vec<f64>>();
        let seeds = vec![
            (pb, seed(gd.shape(pb), &flat(&ce_b.grads), 1.0 / nb)),
            (cls_real, seed(gd.shape(cls_real), &flat(&ce_s.grads), 1.0 / nb)),
            (s_real, seed(gd.shape(s_real), &[adv.grads[0].clone(), adv.grads[2].clone()].concat(), -1.0)),
            (s_fake, seed(gd.shape(s_fake), &[adv.grads[1].clone(), adv.grads[3].clone()].concat(), -1.0)),
        ];
        let grads = gd.backward(&seeds);
        state.opt_d.update(&mut state.bundle.params, &grads, is_discriminator_param);
        (adv.value, (ce_b.value / nb, ce_s.value / nb))
    };
    log::trace!("iteration {iteration}: D_b ce {:.4}, D_s ce {:.4}", d_report.0, d_report.1);

    // encoder/generator losses against the updated, frozen discriminators
    let (pb_g, s_fake_g, cls_fake_g);
    {
        let net = Net::new(&cfg, &state.bundle.params).frozen(&DISCRIMINATOR_PREFIXES);
        pb_g = net.discriminate_brain(&mut g, zb);
        let (sc, cl) = net.discriminate_scanner(&mut g, x_sw);
        s_fake_g = sc;
        cls_fake_g = cl;
    }
    let m = x_t.len() / n;
    let xv = to_f64(g.value(x));
    let cyc = to_f64(g.value(x_cyc));
    let slf = to_f64(g.value(x_self));
    let split = b * m;
    let cc = objective::cycle_consistency_loss(&xv[..split], &xv[split..], &cyc[..split], &cyc[split..])?;
    let rec = objective::self_reconstruction_loss(&xv[..split], &xv[split..], &slf[..split], &slf[split..])?;

    let pt = pair_prob(g.value(pb_g), &classes, &others);
    let adv_b = objective::brain_adversarial_loss(&pt[..b], &pt[b..])?;
    let cls_rows = rows(g.value(cls_fake_g));
    let cls_refs: Vec<&[f64]> = cls_rows.iter().map(Vec::as_slice).collect();
    let cls = objective::scanner_classification_loss(&cls_refs, &classes)?;
    let sfk = to_f64(g.value(s_fake_g));
    let gen_adv = objective::generator_adversarial_loss(&sfk[..b], &sfk[b..])?;

    let mu_f = to_f64(g.value(post_f.mu));
    let sf = objective::scanner_free_loss(&mu_f[..b * s], &mu_f[b * s..])?;
    let mu = to_f64(g.value(post.mu));
    let sigma = to_f64(g.value(post.sigma));
    let kl = objective::kl_loss(&mu, &sigma)?;
    let lat = objective::latent_loss(&mu)?;

    let nb = n as f64;
    let bf = b as f64;
    let report = LossReport {
        iter: iteration,
        cc: cc.value,
        rec: rec.value,
        adv_b: adv_b.value,
        cls_s: cls.value / bf,
        adv_s: adv_s_report,
        sf: sf.value,
        kl: kl.value / nb,
        lat: lat.value,
        total: 0.0,
    }
    .with_total(&w);
    if !report.is_finite() {
        return Err(Error::NonFinite {
            iteration,
            report: report.csv_row(),
        });
    }

    let cat = |a: &[f64], b: &[f64]| [a, b].concat();
    let cls_flat: Vec<f64> = cls.grads.iter().flatten().copied().collect();
    let seeds: Vec<(Var, Tensor<f32>)> = vec![
        (x_cyc, seed(g.shape(x_cyc), &cat(&cc.grads[0], &cc.grads[1]), w.lambda_cc)),
        (x_self, seed(g.shape(x_self), &cat(&rec.grads[0], &rec.grads[1]), w.lambda_rec)),
        (
            pb_g,
            scatter_pair(g.value(pb_g), &classes, &others, &cat(&adv_b.grads[0], &adv_b.grads[1]), -w.lambda_adv_b),
        ),
        (cls_fake_g, seed(g.shape(cls_fake_g), &cls_flat, w.lambda_cls_s / bf)),
        (s_fake_g, seed(g.shape(s_fake_g), &cat(&gen_adv.grads[0], &gen_adv.grads[1]), w.lambda_adv_s)),
        (post_f.mu, seed(g.shape(post_f.mu), &cat(&sf.grads[0], &sf.grads[1]), w.lambda_sf)),
        (post.mu, seed(g.shape(post.mu), &kl.grads[0], w.lambda_kl / nb)),
        (post.sigma, seed(g.shape(post.sigma), &kl.grads[1], w.lambda_kl / nb)),
        (post.mu, seed(g.shape(post.mu), &lat.grads[0], w.lambda_lat)),
    ];
    let grads = g.backward(&seeds);
    state
        .opt_g
        .update(&mut state.bundle.params, &grads, |name| !is_discriminator_param(name));
    state.bundle.iteration = iteration;
    Ok(report)
}

/// Training windows grouped by scanner.
#[derive(Debug, Clone)]
pub struct WindowPool {
    /// `pools[s]` holds every window of every training image of scanner `s`.
    pub pools: Vec<Vec<Volume>>,
}

impl WindowPool {
    pub fn new(images: &[(Volume, usize)], plan: &WindowPlan, n_scanners: usize) -> Result<Self> {
        let mut pools = vec![Vec::new(); n_scanners];
        for (v, s) in images {
            if *s >= n_scanners {
                return Err(Error::Label(format!("scanner {s} out of {n_scanners}")));
            }
            pools[*s].extend(split_windows(v, plan)?.windows);
        }
        let present = pools.iter().filter(|p| !p.is_empty()).count();
        if present < 2 {
            return Err(Error::Config(format!("training data covers {present} scanner(s); need at least 2")));
        }
        Ok(Self { pools })
    }

    fn scanners(&self) -> Vec<usize> {
        (0..self.pools.len()).filter(|&s| !self.pools[s].is_empty()).collect()
    }
}

/// Where [`run_training`] writes its log and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

fn open_log(path: &Path, keep_until: u64) -> Result<std::fs::File> {
    let mut kept = Vec::new();
    if keep_until > 0 {
        if let Ok(text) = std::fs::read_to_string(path) {
            for line in text.lines().skip(1) {
                let r = LossReport::parse_csv_row(line)?;
                if r.iter <= keep_until {
                    kept.push(line.to_string());
                }
            }
        }
    }
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", LossReport::CSV_HEADER)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}

/// Runs steps until `state.config.iterations`, sampling an ordered pair of
/// distinct scanners uniformly and one random window per domain each step.
pub fn run_training(state: &mut TrainState, pool: &WindowPool, out: &TrainOutputs) -> Result<Vec<LossReport>> {
    let cfg = state.config.clone();
    let scanners = pool.scanners();
    let mut log = match &out.log {
        Some(p) => Some(open_log(p, state.bundle.iteration)?),
        None => None,
    };
    let mut reports = Vec::new();
    while state.bundle.iteration < cfg.iterations {
        let i = state.rng.random_range(0..scanners.len());
        let mut j = state.rng.random_range(0..scanners.len() - 1);
        if j >= i {
            j += 1;
        }
        let (c_k, c_h) = (scanners[i], scanners[j]);
        let draw = |c: usize, state: &mut TrainState| -> Vec<Volume> {
            (0..cfg.batch_size)
                .map(|_| {
                    let w = &pool.pools[c][state.rng.random_range(0..pool.pools[c].len())];
                    if cfg.augment {
                        let seed: u64 = state.rng.random();
                        elastic_augment(w, cfg.augment_magnitude, seed)
                    } else {
                        w.clone()
                    }
                })
                .collect()
        };
        let bk = draw(c_k, state);
        let bh = draw(c_h, state);
        let rk: Vec<&Volume> = bk.iter().collect();
        let rh: Vec<&Volume> = bh.iter().collect();
        let report = train_step(state, &rk, c_k, &rh, c_h)?;
        if let Some(f) = log.as_mut() {
            writeln!(f, "{}", report.csv_row())?;
        }
        if report.iter % 100 == 0 {
            log::info!("{}", report.csv_row());
        }
        reports.push(report);
        if let Some(dir) = &out.checkpoint_dir {
            if cfg.checkpoint_every > 0 && report.iter % cfg.checkpoint_every == 0 {
                state.save(&dir.join(CHECKPOINT_FILE))?;
            }
        }
    }
    Ok(reports)
}

/// Mean scanner-encoder posterior mean over all windows of each scanner's
/// first `n_images` images, stored as that scanner's reference code.
pub fn build_reference_bank(bundle: &mut ModelBundle, images: &[(Volume, usize)], plan: &WindowPlan, n_images: usize) -> Result<()> {
    let s = bundle.config.style_dim;
    let zero = vec![0.0f32; s];
    bundle.reference_bank.clear();
    for scanner in 0..bundle.config.n_scanners {
        let mut acc = vec![0.0f64; s];
        let mut count = 0usize;
        for (v, _) in images.iter().filter(|(_, c)| *c == scanner).take(n_images.max(1)) {
            let label = bundle.label(scanner)?;
            for w in split_windows(v, plan)?.windows {
                let post = bundle.encode_scanner(&w, &label, &zero)?;
                for (a, m) in acc.iter_mut().zip(&post.mu) {
                    *a += *m as f64;
                }
                count += 1;
            }
        }
        if count > 0 {
            bundle
                .reference_bank
                .insert(scanner, acc.iter().map(|a| (a / count as f64) as f32).collect());
        }
    }
    Ok(())
}

/// Trains from scratch (or continues `resume`) on in-memory images.
pub fn train_on(
    config: &TrainConfig,
    images: &[(Volume, usize)],
    resume: Option<TrainState>,
    out: &TrainOutputs,
) -> Result<(TrainState, Vec<LossReport>)> {
    config.validate()?;
    let mut state = match resume {
        Some(mut s) => {
            s.config.iterations = config.iterations;
            s
        }
        None => TrainState::new(config.clone())?,
    };
    let pool = WindowPool::new(images, &state.config.window, state.config.model.n_scanners)?;
    if let Some(v) = pool.pools.iter().flatten().next() {
        if v.shape() != state.config.model.input_shape {
            return Err(Error::Config(format!(
                "window shape {:?} does not match model input {:?}",
                v.shape(),
                state.config.model.input_shape
            )));
        }
    }
    let reports = run_training(&mut state, &pool, out)?;
    let plan = state.config.window.clone();
    build_reference_bank(&mut state.bundle, images, &plan, state.config.reference_images)?;
    if let Some(dir) = &out.checkpoint_dir {
        state.save(&dir.join(CHECKPOINT_FILE))?;
    }
    Ok((state, reports))
}

/// Loads the training split of a manifest as `(volume, scanner)` pairs.
pub fn load_split(manifest: &Manifest, split: Split) -> Result<Vec<(Volume, usize)>> {
    manifest
        .split(split)
        .map(|e| Ok((load_volume(&manifest.resolve(e))?, e.scanner_id)))
        .collect()
}

/// Trains on the training split of a manifest and returns the final bundle.
pub fn train(config: &TrainConfig, manifest: &Manifest, out: &TrainOutputs) -> Result<ModelBundle> {
    let images = load_split(manifest, Split::Train)?;
    let scanners: std::collections::BTreeSet<usize> = images.iter().map(|(_, s)| *s).collect();
    if scanners.len() < 2 {
        return Err(Error::Config(format!("manifest has {} training scanner(s); need at least 2", scanners.len())));
    }
    Ok(train_on(config, &images, None, out)?.0.bundle)
}

/// Disjoint windows matching the bundle's input depth.
pub fn default_plan(bundle: &ModelBundle) -> WindowPlan {
    let w = bundle.config.input_shape[2];
    WindowPlan::new(w, w)
}

fn check_volume(v: &Volume, bundle: &ModelBundle, plan: &WindowPlan) -> Result<()> {
    if !v.is_normalized() {
        return Err(Error::Domain("input volume is not normalized to [0, 1]".into()));
    }
    let mut expect = v.shape();
    expect[plan.axis.index()] = plan.window_size;
    if expect != bundle.config.input_shape {
        return Err(Error::shape(&bundle.config.input_shape, &expect));
    }
    Ok(())
}

fn harmonize_windows(v: &Volume, bundle: &ModelBundle, plan: &WindowPlan, z: &[f32], label: &ScannerLabel) -> Result<Volume> {
    check_volume(v, bundle, plan)?;
    let mut ws = split_windows(v, plan)?;
    let refs: Vec<&Volume> = ws.windows.iter().collect();
    let embeddings = bundle.encode_brain_batch(&refs)?;
    let generated = embeddings
        .iter()
        .map(|zb| bundle.generate(zb, z, label))
        .collect::<Result<Vec<_>>>()?;
    ws.windows = generated;
    let mut out = merge_windows(&ws)?;
    out.meta = v.meta.clone();
    out.refresh_normalized();
    Ok(out)
}

/// The scanner-free code used for a volume: one standard-normal draw per seed.
pub fn scanner_free_code(bundle: &ModelBundle, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5F));
    bundle.sample_eps(&mut rng)
}

/// Maps a volume into the scanner-free space with a single code per volume.
pub fn harmonize_scanner_free(v: &Volume, bundle: &ModelBundle, seed: u64) -> Result<Volume> {
    harmonize_scanner_free_with(v, bundle, seed, &default_plan(bundle))
}

pub fn harmonize_scanner_free_with(v: &Volume, bundle: &ModelBundle, seed: u64, plan: &WindowPlan) -> Result<Volume> {
    let z = scanner_free_code(bundle, seed);
    harmonize_windows(v, bundle, plan, &z, &ScannerLabel::null(bundle.config.n_scanners))
}

/// Re-renders a volume with the stored reference code of `scanner_id`.
pub fn harmonize_to_reference(v: &Volume, bundle: &ModelBundle, scanner_id: usize) -> Result<Volume> {
    harmonize_to_reference_with(v, bundle, scanner_id, &default_plan(bundle))
}

pub fn harmonize_to_reference_with(v: &Volume, bundle: &ModelBundle, scanner_id: usize, plan: &WindowPlan) -> Result<Volume> {
    let z = bundle
        .reference_bank
        .get(&scanner_id)
        .ok_or_else(|| Error::Lookup(scanner_id.to_string()))?
        .clone();
    let label = ScannerLabel::domain(scanner_id, bundle.config.n_scanners).map_err(|_| Error::Lookup(scanner_id.to_string()))?;
    harmonize_windows(v, bundle, plan, &z, &label)
}

/// Mean L1 distance between null-label scanner codes of scanner-free
/// renderings of paired windows that share one code.
pub fn scanner_free_gap(bundle: &ModelBundle, pairs: &[(&Volume, &Volume)], seed: u64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("window pairs".into()));
    }
    let z = scanner_free_code(bundle, seed);
    let null = ScannerLabel::null(bundle.config.n_scanners);
    let zero = vec![0.0; bundle.config.style_dim];
    let mut total = 0.0;
    for (a, b) in pairs {
        let zb = bundle.encode_brain_batch(&[a, b])?;
        let oa = bundle.generate(&zb[0], &z, &null)?;
        let ob = bundle.generate(&zb[1], &z, &null)?;
        let ma = bundle.encode_scanner(&oa, &null, &zero)?.mu;
        let mb = bundle.encode_scanner(&ob, &null, &zero)?.mu;
        total += ma.iter().zip(&mb).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / ma.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}
