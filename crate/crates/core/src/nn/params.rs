//! Named parameter storage, initialization and the Adam optimizer.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Float, Gradients, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Float> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// He-normal weights for a cubic conv kernel `[cout, cin, k, k, k]`.
    pub fn add_conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, rng: &mut impl Rng) -> ParamId {
        let fan_in = cin * k * k * k;
        let std = (2.0 / (1.04 * fan_in as f64)).sqrt();
        let w = normal(&[cout, cin, k, k, k], std, rng);
        self.add(format!("{name}.w"), w)
    }

    pub fn add_linear(&mut self, name: &str, fout: usize, fin: usize, rng: &mut impl Rng) -> ParamId {
        let std = (1.0 / fin as f64).sqrt();
        self.add(format!("{name}.w"), normal(&[fout, fin], std, rng))
    }

    pub fn add_bias(&mut self, name: &str, n: usize) -> ParamId {
        self.add(format!("{name}.b"), Tensor::zeros(&[n]))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Converts every parameter to another float type.
    pub fn cast<U: Float>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|t| Tensor::from_vec(t.shape(), t.data().iter().map(|&x| U::lit(x.as_f64())).collect()))
                .collect(),
        }
    }
}

fn normal<T: Float>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the subset of parameters it has been handed gradients for.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Option<Tensor<T>>>,
    pub second: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, n_params: usize) -> Self {
        Self {
            config,
            step: 0,
            first: vec![None; n_params],
            second: vec![None; n_params],
        }
    }

    /// One update of every parameter accepted by `select` that has a gradient.
    pub fn update(&mut self, ps: &mut ParamSet<T>, grads: &Gradients<T>, select: impl Fn(&str) -> bool) {
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let one = T::one();
        let mut ids: Vec<_> = grads.params().map(|(id, _)| id).collect();
        ids.sort();
        for id in ids {
            if !select(ps.name(id)) {
                continue;
            }
            let g = grads.param(id).expect("listed gradient");
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = ps.value_mut(id);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
