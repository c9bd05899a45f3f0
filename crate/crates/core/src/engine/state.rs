use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Container, ModelBundle};
use crate::nn::{Adam, Tensor};

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub bundle: ModelBundle,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub rng: ChaCha8Rng,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    /// Decimal string: JSON numbers cannot carry a u128 exactly.
    word_pos: String,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let bundle = ModelBundle::init(config.model.clone())?;
        let n = bundle.params.len();
        Ok(Self {
            opt_g: Adam::new(config.adam(config.lr_generator), n),
            opt_d: Adam::new(config.adam(config.lr_discriminator), n),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            bundle,
        })
    }

    pub fn iteration(&self) -> u64 {
        self.bundle.iteration
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = self.bundle.to_container()?;
        c.meta.insert("kind".into(), "train_state".into());
        c.meta.insert("train_config".into(), serde_json::to_value(&self.config)?);
        let rng = RngState {
            seed: self.rng.get_seed().to_vec(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos().to_string(),
        };
        c.meta.insert("rng".into(), serde_json::to_value(rng)?);
        for (tag, opt) in [("adam_g", &self.opt_g), ("adam_d", &self.opt_d)] {
            c.meta.insert(format!("{tag}_step"), opt.step.into());
            for (id, name, _) in self.bundle.params.iter() {
                if let (Some(m), Some(v)) = (&opt.first[id.0], &opt.second[id.0]) {
                    c.push(format!("{tag}.m.{name}"), m.shape(), m.data().to_vec());
                    c.push(format!("{tag}.v.{name}"), v.shape(), v.data().to_vec());
                }
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let bundle = ModelBundle::from_container(c, path)?;
        let config: TrainConfig = c.meta_field("train_config", path)?;
        let rs: RngState = c.meta_field("rng", path)?;
        let seed: [u8; 32] = rs
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::format(path, "rng seed must be 32 bytes"))?;
        let word_pos: u128 = rs
            .word_pos
            .parse()
            .map_err(|_| Error::format(path, "bad rng word position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(rs.stream);
        rng.set_word_pos(word_pos);
        let n = bundle.params.len();
        let mut opts = Vec::with_capacity(2);
        for (tag, lr) in [("adam_g", config.lr_generator), ("adam_d", config.lr_discriminator)] {
            let mut opt = Adam::new(config.adam(lr), n);
            opt.step = c.meta_field(&format!("{tag}_step"), path)?;
            for (id, name, _) in bundle.params.iter() {
                if let (Some(m), Some(v)) = (c.get(&format!("{tag}.m.{name}")), c.get(&format!("{tag}.v.{name}"))) {
                    opt.first[id.0] = Some(Tensor::from_vec(&m.shape, m.data.clone()));
                    opt.second[id.0] = Some(Tensor::from_vec(&v.shape, v.data.clone()));
                }
            }
            opts.push(opt);
        }
        let opt_d = opts.pop().unwrap();
        let opt_g = opts.pop().unwrap();
        Ok(Self {
            config,
            bundle,
            opt_g,
            opt_d,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}
