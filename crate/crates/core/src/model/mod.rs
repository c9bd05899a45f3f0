//! The five networks: brain encoder, variational scanner encoder, generator,
//! brain discriminator and scanner discriminator.
//!
//! Network tensors are `[N, C, D, H, W]` where a volume window of shape
//! `(H, W, D)` is laid out depth-major, so the long in-plane axes stay
//! innermost.

mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{Container, NamedArray};

use crate::error::{Error, Result};
use crate::nn::{Float, Graph, ParamSet, Tensor, Var};
use crate::volume::Volume;

const LRELU: f64 = 0.2;
const IN_EPS: f64 = 1e-5;
const LOG_SIGMA_RANGE: (f64, f64) = (-6.0, 2.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Window shape in volume order `(H, W, D)`.
    pub input_shape: [usize; 3],
    pub n_scanners: usize,
    pub base_channels: usize,
    pub brain_channels: usize,
    pub style_dim: usize,
    pub attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_shape: [32, 32, 8],
            n_scanners: 3,
            base_channels: 16,
            brain_channels: 8,
            style_dim: 16,
            attention: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_shape.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("input shape {:?} has an empty axis", self.input_shape)));
        }
        if self.n_scanners < 2 {
            return Err(Error::Config(format!("need at least 2 scanners, got {}", self.n_scanners)));
        }
        if self.base_channels < 2 || self.brain_channels == 0 || self.style_dim == 0 {
            return Err(Error::Config("channel counts and style dimension must be positive".into()));
        }
        Ok(())
    }

    /// Network spatial dims `(D, H, W)` of an input window.
    pub fn tensor_spatial(&self) -> [usize; 3] {
        let [h, w, d] = self.input_shape;
        [d, h, w]
    }

    /// Spatial shape of the brain embedding, in volume order.
    pub fn embedding_shape(&self) -> [usize; 3] {
        embedding_shape(self.input_shape)
    }

    fn upsample_channels(&self) -> usize {
        (self.base_channels / 2).max(1)
    }
}

/// Halving rule of a stride-2, padding-1, kernel-3 convolution.
pub fn embedding_shape(input: [usize; 3]) -> [usize; 3] {
    input.map(|n| n.div_ceil(2))
}

/// One-hot scanner domain, or the all-zero null label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScannerLabel {
    onehot: Vec<f32>,
}

impl ScannerLabel {
    pub fn domain(index: usize, n: usize) -> Result<Self> {
        if index >= n {
            return Err(Error::Label(format!("scanner {index} out of {n}")));
        }
        let mut onehot = vec![0.0; n];
        onehot[index] = 1.0;
        Ok(Self { onehot })
    }

    pub fn null(n: usize) -> Self {
        Self { onehot: vec![0.0; n] }
    }

    pub fn from_onehot(onehot: Vec<f32>) -> Result<Self> {
        let ones = onehot.iter().filter(|&&v| v == 1.0).count();
        if onehot.iter().any(|&v| v != 0.0 && v != 1.0) || ones > 1 {
            return Err(Error::Label(format!("not one-hot or null: {onehot:?}")));
        }
        Ok(Self { onehot })
    }

    pub fn index(&self) -> Option<usize> {
        self.onehot.iter().position(|&v| v == 1.0)
    }

    pub fn is_null(&self) -> bool {
        self.index().is_none()
    }

    pub fn len(&self) -> usize {
        self.onehot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.onehot.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.onehot
    }
}

/// Stacks labels into an `[N, n_scanners]` tensor.
pub fn labels_tensor<T: Float>(labels: &[&ScannerLabel]) -> Tensor<T> {
    let k = labels[0].len();
    let data = labels.iter().flat_map(|l| l.as_slice().iter().map(|&v| T::lit(v as f64))).collect();
    Tensor::from_vec(&[labels.len(), k], data)
}

/// Anatomical latent map at half resolution. `data` is laid out
/// `[channels, D, H, W]`; `shape` is the spatial size in volume order.
#[derive(Debug, Clone, PartialEq)]
pub struct BrainEmbedding {
    pub channels: usize,
    pub shape: [usize; 3],
    pub data: Vec<f32>,
}

impl BrainEmbedding {
    fn tensor_shape(&self) -> [usize; 5] {
        let [h, w, d] = self.shape;
        [1, self.channels, d, h, w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScannerPosterior {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
    pub eps: Vec<f32>,
    pub z_s: Vec<f32>,
}

/// Batches volumes into an `[N, 1, D, H, W]` tensor.
pub fn volumes_to_tensor<T: Float>(vols: &[&Volume]) -> Tensor<T> {
    let [h, w, d] = vols[0].shape();
    let mut data = Vec::with_capacity(vols.len() * h * w * d);
    for v in vols {
        assert_eq!(v.shape(), [h, w, d], "batched volumes must share a shape");
        let src = v.data();
        for k in 0..d {
            for i in 0..h {
                for j in 0..w {
                    data.push(T::lit(src[(i * w + j) * d + k] as f64));
                }
            }
        }
    }
    Tensor::from_vec(&[vols.len(), 1, d, h, w], data)
}

/// Inverse of [`volumes_to_tensor`] for a single-channel batch.
pub fn tensor_to_volumes<T: Float>(t: &Tensor<T>) -> Result<Vec<Volume>> {
    let s = t.shape();
    if s.len() != 5 || s[1] != 1 {
        return Err(Error::shape(&[0, 1, 0, 0, 0], s));
    }
    let (n, d, h, w) = (s[0], s[2], s[3], s[4]);
    let m = d * h * w;
    (0..n)
        .map(|b| {
            let src = &t.data()[b * m..(b + 1) * m];
            let mut data = vec![0.0f32; m];
            for k in 0..d {
                for i in 0..h {
                    for j in 0..w {
                        data[(i * w + j) * d + k] = src[(k * h + i) * w + j].as_f64() as f32;
                    }
                }
            }
            Volume::new([h, w, d], data)
        })
        .collect()
}

fn scale_init<T: Float>(ps: &mut ParamSet<T>, name: &str, factor: f64) {
    let id = ps.find(name).expect("parameter just created");
    let f = T::lit(factor);
    ps.value_mut(id).data_mut().iter_mut().for_each(|v| *v *= f);
}

fn add_attention<T: Float>(ps: &mut ParamSet<T>, prefix: &str, c: usize, rng: &mut impl Rng) {
    let hidden = (c / 4).max(1);
    ps.add_linear(&format!("{prefix}.fc1"), hidden, c, rng);
    ps.add_bias(&format!("{prefix}.fc1"), hidden);
    ps.add_linear(&format!("{prefix}.fc2"), c, hidden, rng);
    ps.add_bias(&format!("{prefix}.fc2"), c);
    ps.add_conv(&format!("{prefix}.sp"), 1, 2, 3, rng);
    ps.add_bias(&format!("{prefix}.sp"), 1);
}

fn add_conv_b<T: Float>(ps: &mut ParamSet<T>, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) {
    ps.add_conv(name, cout, cin, k, rng);
    ps.add_bias(name, cout);
}

fn add_linear_b<T: Float>(ps: &mut ParamSet<T>, name: &str, fout: usize, fin: usize, rng: &mut impl Rng) {
    ps.add_linear(name, fout, fin, rng);
    ps.add_bias(name, fout);
}

/// Seeded initialization of every module. Names are prefixed `eb.`, `es.`,
/// `g.`, `db.`, `ds.`.
pub fn init_params<T: Float>(cfg: &ModelConfig) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rng = &mut rng;
    let (c, cb, s, n) = (cfg.base_channels, cfg.brain_channels, cfg.style_dim, cfg.n_scanners);
    let cu = cfg.upsample_channels();
    let mut ps = ParamSet::new();

    ps.add_conv("eb.in", c, 1, 3, rng);
    ps.add_conv("eb.down", c, c, 3, rng);
    ps.add_conv("eb.res1", c, c, 3, rng);
    ps.add_conv("eb.res2", c, c, 3, rng);
    if cfg.attention {
        add_attention(&mut ps, "eb.att", c, rng);
    }
    add_conv_b(&mut ps, "eb.out", cb, c, 1, rng);

    add_conv_b(&mut ps, "es.c1", c, 1 + n, 3, rng);
    add_conv_b(&mut ps, "es.c2", 2 * c, c, 3, rng);
    add_conv_b(&mut ps, "es.c3", 2 * c, 2 * c, 3, rng);
    add_linear_b(&mut ps, "es.mu", s, 2 * c, rng);
    add_linear_b(&mut ps, "es.logsig", s, 2 * c, rng);
    scale_init(&mut ps, "es.logsig.w", 0.1);

    ps.add_conv("g.in", c, cb + n, 3, rng);
    for ada in ["g.ada1", "g.ada2"] {
        for part in ["gamma", "beta"] {
            let name = format!("{ada}.{part}");
            add_linear_b(&mut ps, &name, c, s, rng);
            scale_init(&mut ps, &format!("{name}.w"), 0.1);
        }
    }
    ps.add_conv("g.mid", c, c, 3, rng);
    if cfg.attention {
        add_attention(&mut ps, "g.att", c, rng);
    }
    add_conv_b(&mut ps, "g.up", 8 * cu, c, 3, rng);
    add_conv_b(&mut ps, "g.out", 1, cu, 3, rng);

    add_conv_b(&mut ps, "db.c1", c, cb, 3, rng);
    if cfg.attention {
        add_attention(&mut ps, "db.att", c, rng);
    }
    add_conv_b(&mut ps, "db.c2", c, c, 3, rng);
    add_linear_b(&mut ps, "db.fc", n, c, rng);
    scale_init(&mut ps, "db.fc.w", 0.1);

    add_conv_b(&mut ps, "ds.c1", c, 1, 3, rng);
    add_conv_b(&mut ps, "ds.c2", 2 * c, c, 3, rng);
    add_conv_b(&mut ps, "ds.c3", 2 * c, 2 * c, 3, rng);
    add_linear_b(&mut ps, "ds.src", 1, 2 * c, rng);
    add_linear_b(&mut ps, "ds.cls", n, 2 * c, rng);
    scale_init(&mut ps, "ds.src.w", 0.1);
    scale_init(&mut ps, "ds.cls.w", 0.1);
    Ok(ps)
}

/// Parameter prefixes of the encoder/generator side and discriminator side.
pub const GENERATOR_PREFIXES: [&str; 3] = ["eb.", "es.", "g."];
pub const DISCRIMINATOR_PREFIXES: [&str; 2] = ["db.", "ds."];

pub fn is_discriminator_param(name: &str) -> bool {
    DISCRIMINATOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Graph nodes of a scanner posterior.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mu: Var,
    pub sigma: Var,
    pub z: Var,
}

/// Forward builders over a parameter set. Parameters under a frozen prefix
/// enter the graph as constants and receive no gradient.
pub struct Net<'a, T: Float> {
    pub cfg: &'a ModelConfig,
    ps: &'a ParamSet<T>,
    frozen: &'a [&'a str],
}

impl<'a, T: Float> Net<'a, T> {
    pub fn new(cfg: &'a ModelConfig, ps: &'a ParamSet<T>) -> Self {
        Self { cfg, ps, frozen: &[] }
    }

    pub fn frozen(mut self, prefixes: &'a [&'a str]) -> Self {
        self.frozen = prefixes;
        self
    }

    fn w(&self, g: &mut Graph<T>, name: &str) -> Var {
        let id = self.ps.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        if self.frozen.iter().any(|p| name.starts_with(p)) {
            g.constant(self.ps.value(id).clone())
        } else {
            g.param(self.ps, id)
        }
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, name: &str, stride: usize, bias: bool) -> Var {
        let w = self.w(g, &format!("{name}.w"));
        let k = g.shape(w)[2];
        let b = bias.then(|| self.w(g, &format!("{name}.b")));
        g.conv3d(x, w, b, stride, k / 2)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, name: &str) -> Var {
        let w = self.w(g, &format!("{name}.w"));
        let b = self.w(g, &format!("{name}.b"));
        g.linear(x, w, Some(b))
    }

    fn lrelu(g: &mut Graph<T>, x: Var) -> Var {
        g.leaky_relu(x, T::lit(LRELU))
    }

    fn norm(g: &mut Graph<T>, x: Var) -> Var {
        g.instance_norm(x, T::lit(IN_EPS))
    }

    /// Channel gate from pooled statistics, then spatial gate from channel
    /// mean/max maps; both gates multiply the features.
    pub fn attention(&self, g: &mut Graph<T>, h: Var, prefix: &str) -> Var {
        let shape = g.shape(h).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let avg = g.mean_spatial(h);
        let mx = g.max_spatial(h);
        let mut gates = Vec::with_capacity(2);
        for pooled in [avg, mx] {
            let a = self.linear(g, pooled, &format!("{prefix}.fc1"));
            let a = Self::lrelu(g, a);
            gates.push(self.linear(g, a, &format!("{prefix}.fc2")));
        }
        let logits = g.add(gates[0], gates[1]);
        let cg = g.sigmoid(logits);
        let cg = g.reshape(cg, &[n, c, 1, 1, 1]);
        let h1 = g.mul_bcast(h, cg);
        let mean = g.mean_channel(h1);
        let max = g.max_channel(h1);
        let maps = g.concat(&[mean, max]);
        let sp = self.conv(g, maps, &format!("{prefix}.sp"), 1, true);
        let sg = g.sigmoid(sp);
        g.mul_bcast(h1, sg)
    }

    pub fn encode_brain(&self, g: &mut Graph<T>, x: Var) -> Var {
        let h = self.conv(g, x, "eb.in", 1, false);
        let h = Self::norm(g, h);
        let h = Self::lrelu(g, h);
        let h = self.conv(g, h, "eb.down", 2, false);
        let h = Self::norm(g, h);
        let h = Self::lrelu(g, h);
        let r = self.conv(g, h, "eb.res1", 1, false);
        let r = Self::norm(g, r);
        let r = Self::lrelu(g, r);
        let r = self.conv(g, r, "eb.res2", 1, false);
        let r = Self::norm(g, r);
        let h = g.add(h, r);
        let mut h = Self::lrelu(g, h);
        if self.cfg.attention {
            h = self.attention(g, h, "eb.att");
        }
        self.conv(g, h, "eb.out", 1, true)
    }

    fn label_maps(g: &mut Graph<T>, labels: &Tensor<T>, spatial: &[usize]) -> Var {
        let (n, k) = (labels.shape()[0], labels.shape()[1]);
        let m: usize = spatial.iter().product();
        let mut data = Vec::with_capacity(n * k * m);
        for &v in labels.data() {
            data.extend(std::iter::repeat_n(v, m));
        }
        g.constant(Tensor::from_vec(&[n, k, spatial[0], spatial[1], spatial[2]], data))
    }

    /// Posterior `(mu, sigma)` and the reparameterized sample
    /// `z = sigma * eps + mu` for externally supplied `eps` `[N, S]`.
    pub fn encode_scanner(&self, g: &mut Graph<T>, x: Var, labels: &Tensor<T>, eps: &Tensor<T>) -> PosteriorVars {
        let spatial = g.shape(x)[2..].to_vec();
        let lm = Self::label_maps(g, labels, &spatial);
        let mut h = g.concat(&[x, lm]);
        for (name, stride) in [("es.c1", 2), ("es.c2", 2), ("es.c3", 2)] {
            h = self.conv(g, h, name, stride, true);
            h = Self::lrelu(g, h);
        }
        let pooled = g.mean_spatial(h);
        let mu = self.linear(g, pooled, "es.mu");
        let ls = self.linear(g, pooled, "es.logsig");
        let (lo, hi) = LOG_SIGMA_RANGE;
        let ls = g.clamp(ls, T::lit(lo), T::lit(hi));
        let sigma = g.exp(ls);
        let e = g.constant(eps.clone());
        let noise = g.mul(sigma, e);
        let z = g.add(noise, mu);
        PosteriorVars { mu, sigma, z }
    }

    fn adain(&self, g: &mut Graph<T>, h: Var, z: Var, prefix: &str) -> Var {
        let shape = g.shape(h).to_vec();
        let (n, c) = (shape[0], shape[1]);
        let gamma = self.linear(g, z, &format!("{prefix}.gamma"));
        let gamma = g.add_scalar(gamma, T::one());
        let gamma = g.reshape(gamma, &[n, c, 1, 1, 1]);
        let beta = self.linear(g, z, &format!("{prefix}.beta"));
        let beta = g.reshape(beta, &[n, c, 1, 1, 1]);
        let hn = Self::norm(g, h);
        let hm = g.mul_bcast(hn, gamma);
        g.add_bcast(hm, beta)
    }

    /// Image of network spatial shape `out` from a brain embedding, a scanner
    /// code `z` `[N, S]` and labels.
    pub fn generate(&self, g: &mut Graph<T>, zb: Var, z: Var, labels: &Tensor<T>, out: [usize; 3]) -> Var {
        let spatial = g.shape(zb)[2..].to_vec();
        let lm = Self::label_maps(g, labels, &spatial);
        let h = g.concat(&[zb, lm]);
        let h = self.conv(g, h, "g.in", 1, false);
        let h = self.adain(g, h, z, "g.ada1");
        let h = Self::lrelu(g, h);
        let h = self.conv(g, h, "g.mid", 1, false);
        let h = self.adain(g, h, z, "g.ada2");
        let mut h = Self::lrelu(g, h);
        if self.cfg.attention {
            h = self.attention(g, h, "g.att");
        }
        let h = self.conv(g, h, "g.up", 1, true);
        let h = Self::lrelu(g, h);
        let h = g.pixel_shuffle(h);
        let h = g.crop(h, out);
        let h = self.conv(g, h, "g.out", 1, true);
        g.sigmoid(h)
    }

    /// Scanner probabilities `[N, n_scanners]` from a brain embedding.
    pub fn discriminate_brain(&self, g: &mut Graph<T>, zb: Var) -> Var {
        let h = self.conv(g, zb, "db.c1", 1, true);
        let mut h = Self::lrelu(g, h);
        if self.cfg.attention {
            h = self.attention(g, h, "db.att");
        }
        let h = self.conv(g, h, "db.c2", 2, true);
        let h = Self::lrelu(g, h);
        let p = g.mean_spatial(h);
        let logits = self.linear(g, p, "db.fc");
        g.softmax(logits)
    }

    /// Real/fake score `[N, 1]` and scanner probabilities `[N, n_scanners]`.
    pub fn discriminate_scanner(&self, g: &mut Graph<T>, x: Var) -> (Var, Var) {
        let mut h = x;
        for name in ["ds.c1", "ds.c2", "ds.c3"] {
            h = self.conv(g, h, name, 2, true);
            h = Self::lrelu(g, h);
        }
        let p = g.mean_spatial(h);
        let src = self.linear(g, p, "ds.src");
        let score = g.sigmoid(src);
        let cls = self.linear(g, p, "ds.cls");
        (score, g.softmax(cls))
    }
}

/// Trained (or freshly initialized) model: configuration, parameters,
/// iteration counter and the per-scanner reference codes used for
/// reference-mode harmonization.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub iteration: u64,
    pub reference_bank: BTreeMap<usize, Vec<f32>>,
}

impl ModelBundle {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let params = init_params(&config)?;
        Ok(Self {
            config,
            params,
            iteration: 0,
            reference_bank: BTreeMap::new(),
        })
    }

    pub fn net(&self) -> Net<'_, f32> {
        Net::new(&self.config, &self.params)
    }

    fn check_window(&self, v: &Volume) -> Result<()> {
        if v.shape() != self.config.input_shape {
            return Err(Error::shape(&self.config.input_shape, &v.shape()));
        }
        if !v.is_normalized() {
            return Err(Error::Domain("input volume is not normalized to [0, 1]".into()));
        }
        Ok(())
    }

    pub fn label(&self, scanner: usize) -> Result<ScannerLabel> {
        ScannerLabel::domain(scanner, self.config.n_scanners)
    }

    fn check_label(&self, label: &ScannerLabel) -> Result<()> {
        if label.len() != self.config.n_scanners {
            return Err(Error::Label(format!(
                "label has length {}, model has {} scanners",
                label.len(),
                self.config.n_scanners
            )));
        }
        Ok(())
    }

    /// Standard-normal draw of a scanner code.
    pub fn sample_eps(&self, rng: &mut impl Rng) -> Vec<f32> {
        (0..self.config.style_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z as f32
            })
            .collect()
    }

    pub fn encode_brain(&self, v: &Volume) -> Result<BrainEmbedding> {
        Ok(self.encode_brain_batch(&[v])?.remove(0))
    }

    pub fn encode_brain_batch(&self, vols: &[&Volume]) -> Result<Vec<BrainEmbedding>> {
        if vols.is_empty() {
            return Err(Error::EmptyInput("volume batch".into()));
        }
        for v in vols {
            self.check_window(v)?;
        }
        let mut g = Graph::new();
        let x = g.constant(volumes_to_tensor(vols));
        let zb = self.net().encode_brain(&mut g, x);
        let t = g.value(zb);
        let (c, m) = (t.shape()[1], t.len() / t.shape()[0]);
        let shape = self.config.embedding_shape();
        Ok(t.data()
            .chunks(m)
            .map(|chunk| BrainEmbedding {
                channels: c,
                shape,
                data: chunk.to_vec(),
            })
            .collect())
    }

    pub fn encode_scanner(&self, v: &Volume, label: &ScannerLabel, eps: &[f32]) -> Result<ScannerPosterior> {
        self.check_window(v)?;
        self.check_label(label)?;
        if eps.len() != self.config.style_dim {
            return Err(Error::LengthMismatch(eps.len(), self.config.style_dim));
        }
        let mut g = Graph::new();
        let x = g.constant(volumes_to_tensor(&[v]));
        let post = self.net().encode_scanner(
            &mut g,
            x,
            &labels_tensor(&[label]),
            &Tensor::from_vec(&[1, eps.len()], eps.to_vec()),
        );
        Ok(ScannerPosterior {
            mu: g.value(post.mu).data().to_vec(),
            sigma: g.value(post.sigma).data().to_vec(),
            eps: eps.to_vec(),
            z_s: g.value(post.z).data().to_vec(),
        })
    }

    pub fn generate(&self, zb: &BrainEmbedding, z_s: &[f32], label: &ScannerLabel) -> Result<Volume> {
        self.check_label(label)?;
        if zb.shape != self.config.embedding_shape() || zb.channels != self.config.brain_channels {
            return Err(Error::shape(&self.config.embedding_shape(), &zb.shape));
        }
        if z_s.len() != self.config.style_dim {
            return Err(Error::LengthMismatch(z_s.len(), self.config.style_dim));
        }
        let mut g = Graph::new();
        let zbv = g.constant(Tensor::from_vec(&zb.tensor_shape(), zb.data.clone()));
        let z = g.constant(Tensor::from_vec(&[1, z_s.len()], z_s.to_vec()));
        let out = self
            .net()
            .generate(&mut g, zbv, z, &labels_tensor(&[label]), self.config.tensor_spatial());
        let mut vols = tensor_to_volumes(g.value(out))?;
        Ok(vols.remove(0))
    }

    pub fn discriminate_brain(&self, zb: &BrainEmbedding) -> Result<Vec<f32>> {
        Ok(self.discriminate_brain_batch(std::slice::from_ref(zb))?.remove(0))
    }

    pub fn discriminate_brain_batch(&self, zbs: &[BrainEmbedding]) -> Result<Vec<Vec<f32>>> {
        if zbs.is_empty() {
            return Err(Error::EmptyInput("embedding batch".into()));
        }
        let mut shape = zbs[0].tensor_shape();
        shape[0] = zbs.len();
        let data = zbs.iter().flat_map(|z| z.data.iter().copied()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&shape, data));
        let p = self.net().discriminate_brain(&mut g, x);
        Ok(g.value(p).data().chunks(self.config.n_scanners).map(<[f32]>::to_vec).collect())
    }

    pub fn discriminate_scanner(&self, v: &Volume) -> Result<(f32, Vec<f32>)> {
        self.check_window(v)?;
        let mut g = Graph::new();
        let x = g.constant(volumes_to_tensor(&[v]));
        let (score, cls) = self.net().discriminate_scanner(&mut g, x);
        Ok((g.value(score).data()[0], g.value(cls).data().to_vec()))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::default();
        c.meta.insert("kind".into(), "bundle".into());
        c.meta.insert("config".into(), serde_json::to_value(&self.config)?);
        c.meta.insert("iteration".into(), self.iteration.into());
        for (_, name, t) in self.params.iter() {
            c.push(format!("param.{name}"), t.shape(), t.data().to_vec());
        }
        for (s, z) in &self.reference_bank {
            c.push(format!("ref.{s}"), &[z.len()], z.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let config: ModelConfig = c.meta_field("config", path)?;
        let iteration: u64 = c.meta_field("iteration", path)?;
        let mut params = init_params::<f32>(&config)?;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let key = format!("param.{}", params.name(id));
            let a = c.get(&key).ok_or_else(|| Error::format(path, format!("missing array {key}")))?;
            if a.shape != params.value(id).shape() {
                return Err(Error::format(path, format!("array {key} has shape {:?}", a.shape)));
            }
            *params.value_mut(id) = Tensor::from_vec(&a.shape, a.data.clone());
        }
        let mut reference_bank = BTreeMap::new();
        for a in &c.arrays {
            if let Some(s) = a.name.strip_prefix("ref.") {
                let s: usize = s.parse().map_err(|_| Error::format(path, format!("bad array name {}", a.name)))?;
                reference_bank.insert(s, a.data.clone());
            }
        }
        Ok(Self {
            config,
            params,
            iteration,
            reference_bank,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

#[cfg(test)]
mod tests;
