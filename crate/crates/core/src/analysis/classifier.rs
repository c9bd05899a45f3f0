use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MeanSd;
use crate::error::{Error, Result};
use crate::model::volumes_to_tensor;
use crate::nn::{Adam, AdamConfig, Graph, ParamSet, Tensor, Var};
use crate::seed::derive_seed;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Confusion {
    pub fn from_predictions(pred: &[bool], truth: &[bool]) -> Self {
        let mut c = Self::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub n_splits: usize,
    /// Share of the smaller class held out per split (equal count per class).
    pub test_fraction: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub channels: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            test_fraction: 0.2,
            epochs: 30,
            batch_size: 4,
            lr: 3e-3,
            channels: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub accuracy: MeanSd,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
    pub splits: Vec<Confusion>,
}

struct Cnn {
    ps: ParamSet<f32>,
}

impl Cnn {
    fn new(c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let widths = [(c / 2).max(1), c, c];
        let mut cin = 1;
        for (i, &w) in widths.iter().enumerate() {
            ps.add_conv(&format!("c{i}"), w, cin, 3, &mut rng);
            ps.add_bias(&format!("c{i}"), w);
            cin = w;
        }
        ps.add_linear("head", 1, c, &mut rng);
        ps.add_bias("head", 1);
        Self { ps }
    }

    fn forward(&self, g: &mut Graph<f32>, x: Var) -> Var {
        let p = |g: &mut Graph<f32>, n: &str| g.param(&self.ps, self.ps.find(n).expect("classifier parameter"));
        let mut h = x;
        for i in 0..3 {
            let w = p(g, &format!("c{i}.w"));
            let b = p(g, &format!("c{i}.b"));
            h = g.conv3d(h, w, Some(b), 2, 1);
            h = g.leaky_relu(h, 0.2);
        }
        let pooled = g.mean_spatial(h);
        let w = p(g, "head.w");
        let b = p(g, "head.b");
        g.linear(pooled, w, Some(b))
    }

    fn logits(&self, vols: &[&Volume]) -> Vec<f64> {
        let mut g = Graph::new();
        let x = g.constant(volumes_to_tensor(vols));
        let out = self.forward(&mut g, x);
        g.value(out).data().iter().map(|&v| v as f64).collect()
    }
}

fn train_split(cfg: &ClassifierConfig, vols: &[&Volume], labels: &[bool], seed: u64) -> Cnn {
    let mut net = Cnn::new(cfg.channels, seed);
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        net.ps.len(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut order: Vec<usize> = (0..vols.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Volume> = chunk.iter().map(|&i| vols[i]).collect();
            let mut g = Graph::new();
            let x = g.constant(volumes_to_tensor(&batch));
            let logit = net.forward(&mut g, x);
            // d BCE / d logit = (σ(z) − y) / n
            let n = chunk.len() as f32;
            let seed_grad: Vec<f32> = g
                .value(logit)
                .data()
                .iter()
                .zip(chunk)
                .map(|(&z, &i)| (1.0 / (1.0 + (-z).exp()) - if labels[i] { 1.0 } else { 0.0 }) / n)
                .collect();
            let grads = g.backward(&[(logit, Tensor::from_vec(&[chunk.len(), 1], seed_grad))]);
            opt.update(&mut net.ps, &grads, |_| true);
        }
    }
    net
}

/// Trains and tests a small seeded 3D CNN on `n_splits` stratified random
/// splits with equal class counts in both train and test sets.
pub fn train_toy_classifier(vols: &[&Volume], labels: &[bool], cfg: &ClassifierConfig) -> Result<ClassifierReport> {
    if vols.len() != labels.len() {
        return Err(Error::LengthMismatch(vols.len(), labels.len()));
    }
    if cfg.n_splits == 0 || cfg.batch_size == 0 || !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(Error::Config("invalid classifier configuration".into()));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    let min_class = pos.len().min(neg.len());
    if min_class < 2 * cfg.n_splits {
        return Err(Error::Config(format!(
            "smallest class has {min_class} examples; need at least {} for {} splits",
            2 * cfg.n_splits,
            cfg.n_splits
        )));
    }
    if let Some(v) = vols.iter().find(|v| v.shape() != vols[0].shape()) {
        return Err(Error::shape(&vols[0].shape(), &v.shape()));
    }
    let n_test = ((min_class as f64 * cfg.test_fraction).round() as usize).clamp(1, min_class - 1);
    let n_train = min_class - n_test;
    let mut splits = Vec::with_capacity(cfg.n_splits);
    for s in 0..cfg.n_splits {
        let split_seed = derive_seed(cfg.seed, s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
        let (mut p, mut q) = (pos.clone(), neg.clone());
        p.shuffle(&mut rng);
        q.shuffle(&mut rng);
        let test: Vec<usize> = p[..n_test].iter().chain(&q[..n_test]).copied().collect();
        let train: Vec<usize> = p[n_test..n_test + n_train].iter().chain(&q[n_test..n_test + n_train]).copied().collect();
        let tv: Vec<&Volume> = train.iter().map(|&i| vols[i]).collect();
        let tl: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        // the same initialization for every split and condition
        let net = train_split(cfg, &tv, &tl, derive_seed(cfg.seed, 0xC1A5));
        let ev: Vec<&Volume> = test.iter().map(|&i| vols[i]).collect();
        let pred: Vec<bool> = net.logits(&ev).iter().map(|&z| z > 0.0).collect();
        let truth: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        splits.push(Confusion::from_predictions(&pred, &truth));
    }
    let col = |f: fn(&Confusion) -> f64| MeanSd::of(&splits.iter().map(f).collect::<Vec<_>>());
    Ok(ClassifierReport {
        accuracy: col(Confusion::accuracy),
        precision: col(Confusion::precision),
        recall: col(Confusion::recall),
        f1: col(Confusion::f1),
        splits,
    })
}
