use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn tiny(input: [usize; 3], n: usize) -> ModelConfig {
    ModelConfig {
        input_shape: input,
        n_scanners: n,
        base_channels: 4,
        brain_channels: 2,
        style_dim: 3,
        attention: true,
        seed: 7,
    }
}

fn random_volume(shape: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(shape, |_, _, _| rng.random::<f32>()).unwrap()
}

#[test]
fn embedding_halves_each_axis() {
    assert_eq!(embedding_shape([182, 218, 182]), [91, 109, 91]);
    for (input, want) in [([16, 16, 8], [8, 8, 4]), ([7, 9, 5], [4, 5, 3])] {
        let b = ModelBundle::init(tiny(input, 2)).unwrap();
        let z = b.encode_brain(&random_volume(input, 1)).unwrap();
        assert_eq!(z.shape, want);
        assert_eq!(z.data.len(), 2 * want.iter().product::<usize>());
    }
}

#[test]
fn tensor_layout_round_trip() {
    let v = random_volume([3, 4, 5], 2);
    let t = volumes_to_tensor::<f32>(&[&v, &v]);
    assert_eq!(t.shape(), &[2, 1, 5, 3, 4]);
    assert_eq!(t.data()[(2 * 3 + 1) * 4 + 3], v.get(1, 3, 2));
    let back = tensor_to_volumes(&t).unwrap();
    assert_eq!(back[1].data(), v.data());
}

#[test]
fn encoders_are_deterministic() {
    let b = ModelBundle::init(tiny([8, 8, 4], 2)).unwrap();
    let v = random_volume([8, 8, 4], 3);
    assert_eq!(b.encode_brain(&v).unwrap(), b.encode_brain(&v).unwrap());
    let l = b.label(1).unwrap();
    let eps = [0.3, -1.0, 2.0];
    assert_eq!(b.encode_scanner(&v, &l, &eps).unwrap(), b.encode_scanner(&v, &l, &eps).unwrap());
}

#[test]
fn reparameterization() {
    let b = ModelBundle::init(tiny([8, 8, 4], 3)).unwrap();
    let v = random_volume([8, 8, 4], 4);
    let l = b.label(2).unwrap();
    let p = b.encode_scanner(&v, &l, &[0.0; 3]).unwrap();
    assert_eq!(p.z_s, p.mu);
    let eps = [0.7f32, -1.3, 0.05];
    let p = b.encode_scanner(&v, &l, &eps).unwrap();
    for i in 0..3 {
        assert!(p.sigma[i] > 0.0);
        assert_eq!(p.z_s[i], p.sigma[i] * eps[i] + p.mu[i]);
    }
    assert_eq!(p.mu.len(), 3);
    let full = ModelConfig::default();
    assert_eq!(full.style_dim, 16);
}

#[test]
fn label_errors() {
    let b = ModelBundle::init(tiny([8, 8, 4], 2)).unwrap();
    let v = random_volume([8, 8, 4], 5);
    let wrong = ScannerLabel::domain(0, 3).unwrap();
    assert!(matches!(b.encode_scanner(&v, &wrong, &[0.0; 3]), Err(Error::Label(_))));
    assert!(ScannerLabel::domain(3, 3).is_err());
    assert!(ScannerLabel::from_onehot(vec![1.0, 1.0]).is_err());
    assert!(ScannerLabel::from_onehot(vec![0.0, 0.0]).unwrap().is_null());
    assert_eq!(ScannerLabel::from_onehot(vec![0.0, 1.0]).unwrap().index(), Some(1));
    let other = random_volume([8, 8, 6], 5);
    assert!(matches!(b.encode_brain(&other), Err(Error::Shape { .. })));
}

#[test]
fn generator_contract() {
    let b = ModelBundle::init(tiny([9, 8, 5], 2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let v = random_volume([9, 8, 5], 6);
    let zb = b.encode_brain(&v).unwrap();
    for _ in 0..5 {
        let z = b.sample_eps(&mut rng);
        let out = b.generate(&zb, &z, &ScannerLabel::null(2)).unwrap();
        assert_eq!(out.shape(), v.shape());
        assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        assert_eq!(out, b.generate(&zb, &z, &ScannerLabel::null(2)).unwrap());
    }
    // random latent maps, not just encoder outputs
    let noise = BrainEmbedding {
        data: (0..zb.data.len()).map(|_| rng.random_range(-3.0..3.0)).collect(),
        ..zb.clone()
    };
    let out = b.generate(&noise, &[5.0, -5.0, 0.0], &b.label(0).unwrap()).unwrap();
    assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    assert!(b.generate(&zb, &[0.0; 2], &b.label(0).unwrap()).is_err());
}

#[test]
fn brain_discriminator_contract() {
    let b = ModelBundle::init(tiny([8, 8, 4], 2)).unwrap();
    let vols: Vec<Volume> = (0..3).map(|s| random_volume([8, 8, 4], 10 + s)).collect();
    let refs: Vec<&Volume> = vols.iter().collect();
    let zbs = b.encode_brain_batch(&refs).unwrap();
    let probs = b.discriminate_brain_batch(&zbs).unwrap();
    for p in &probs {
        assert!((p.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert!((p[0] - 0.5).abs() < 0.05, "untrained head should be near uniform: {p:?}");
    }
    let permuted = vec![zbs[2].clone(), zbs[0].clone(), zbs[1].clone()];
    let pp = b.discriminate_brain_batch(&permuted).unwrap();
    assert_eq!(pp[0], probs[2]);
    assert_eq!(pp[1], probs[0]);
    assert_eq!(pp[2], probs[1]);
}

#[test]
fn scanner_discriminator_contract() {
    let b = ModelBundle::init(tiny([8, 8, 4], 3)).unwrap();
    for s in 0..5 {
        let v = random_volume([8, 8, 4], 20 + s);
        let (score, cls) = b.discriminate_scanner(&v).unwrap();
        assert!(score > 0.0 && score < 1.0);
        assert!((cls.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!((score, cls), b.discriminate_scanner(&v).unwrap());
    }
}

fn attention_params(c: usize, gate_bias: f64) -> (ModelConfig, ParamSet<f64>) {
    let cfg = tiny([4, 4, 4], 2);
    let mut ps = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    add_attention(&mut ps, "a", c, &mut rng);
    for name in ["a.fc2.b", "a.sp.b"] {
        let id = ps.find(name).unwrap();
        ps.value_mut(id).data_mut().fill(gate_bias);
    }
    (cfg, ps)
}

#[test]
fn attention_gates() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let shape = [2, 4, 3, 4, 2];
    let n: usize = shape.iter().product();
    let x = Tensor::from_vec(&shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());

    // saturated gates pass features through unchanged
    let (cfg, ps) = attention_params(4, 60.0);
    let net = Net::new(&cfg, &ps);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = net.attention(&mut g, xv, "a");
    assert_eq!(g.value(y).shape(), &shape);
    assert_eq!(g.value(y).data(), x.data());

    let (cfg, ps) = attention_params(4, 0.0);
    let net = Net::new(&cfg, &ps);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = net.attention(&mut g, xv, "a");
    assert_eq!(g.value(y).shape(), &shape);
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!(a.abs() <= b.abs());
    }
    let zero = g.constant(Tensor::zeros(&shape));
    let y = net.attention(&mut g, zero, "a");
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_passes_are_finite() {
    let b = ModelBundle::init(ModelConfig {
        input_shape: [16, 16, 8],
        ..ModelConfig::default()
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for s in 0..3 {
        let v = random_volume([16, 16, 8], 30 + s);
        let zb = b.encode_brain(&v).unwrap();
        assert!(zb.data.iter().all(|x| x.is_finite()));
        let eps = b.sample_eps(&mut rng);
        let post = b.encode_scanner(&v, &b.label(s as usize).unwrap(), &eps).unwrap();
        assert!(post.z_s.iter().chain(&post.sigma).all(|x| x.is_finite()));
        let out = b.generate(&zb, &post.z_s, &b.label(0).unwrap()).unwrap();
        assert!(out.data().iter().all(|x| x.is_finite()));
        let (score, cls) = b.discriminate_scanner(&out).unwrap();
        assert!(score.is_finite() && cls.iter().all(|x| x.is_finite()));
        assert!(b.discriminate_brain(&zb).unwrap().iter().all(|x| x.is_finite()));
    }
}

/// Scalar objective touching every module, for the parameter gradient check.
fn probe_loss(cfg: &ModelConfig, ps: &ParamSet<f64>, x: &Tensor<f64>, coef: &[Tensor<f64>]) -> (Graph<f64>, Vec<Var>) {
    let net = Net::new(cfg, ps);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let labels = labels_tensor::<f64>(&[&ScannerLabel::domain(1, 2).unwrap()]);
    let eps = Tensor::from_vec(&[1, cfg.style_dim], vec![0.3, -0.8, 1.1]);
    let zb = net.encode_brain(&mut g, xv);
    let post = net.encode_scanner(&mut g, xv, &labels, &eps);
    let out = net.generate(&mut g, zb, post.z, &labels, cfg.tensor_spatial());
    let pb = net.discriminate_brain(&mut g, zb);
    let (score, cls) = net.discriminate_scanner(&mut g, out);
    let heads = vec![out, pb, score, cls, post.sigma];
    assert_eq!(heads.len(), coef.len());
    (g, heads)
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let cfg = ModelConfig {
        input_shape: [8, 8, 8],
        n_scanners: 2,
        base_channels: 4,
        brain_channels: 2,
        style_dim: 3,
        attention: true,
        seed: 11,
    };
    let ps: ParamSet<f64> = init_params(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|_| rng.random::<f64>()).collect());
    let shapes = {
        let dummy: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::zeros(&[1])).collect();
        let (g, heads) = probe_loss(&cfg, &ps, &x, &dummy);
        heads.iter().map(|&h| g.shape(h).to_vec()).collect::<Vec<_>>()
    };
    let coef: Vec<Tensor<f64>> = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            Tensor::from_vec(s, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        })
        .collect();
    let eval = |ps: &ParamSet<f64>| -> f64 {
        let (g, heads) = probe_loss(&cfg, ps, &x, &coef);
        heads
            .iter()
            .zip(&coef)
            .map(|(&h, c)| g.value(h).data().iter().zip(c.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    };
    let (g, heads) = probe_loss(&cfg, &ps, &x, &coef);
    let seeds: Vec<_> = heads.iter().copied().zip(coef.iter().cloned()).collect();
    let grads = g.backward(&seeds);

    let h = 1e-6;
    let mut checked = 0;
    for id in ps.ids().collect::<Vec<_>>() {
        let analytic = grads.param(id).unwrap_or_else(|| panic!("no gradient for {}", ps.name(id)));
        let n = ps.value(id).len();
        for k in 0..3.min(n) {
            let i = (k * 7919 + 3) % n;
            let mut plus = ps.clone();
            plus.value_mut(id).data_mut()[i] += h;
            let mut minus = ps.clone();
            minus.value_mut(id).data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            assert!(rel <= 1e-3, "{}[{i}]: analytic {a} vs numeric {numeric}", ps.name(id));
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn bundle_round_trip_is_bit_exact() {
    let mut b = ModelBundle::init(tiny([8, 8, 4], 3)).unwrap();
    b.iteration = 17;
    b.reference_bank.insert(1, vec![0.25, -1.5, 3.0]);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    b.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back, b);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(ModelBundle::load(&path), Err(Error::Format { .. })));
}

#[test]
fn init_is_seeded() {
    let a = init_params::<f32>(&tiny([8, 8, 4], 2)).unwrap();
    let b = init_params::<f32>(&tiny([8, 8, 4], 2)).unwrap();
    assert_eq!(a, b);
    let c = init_params::<f32>(&ModelConfig { seed: 8, ..tiny([8, 8, 4], 2) }).unwrap();
    assert_ne!(a, c);
    assert!(a.iter().all(|(_, n, _)| GENERATOR_PREFIXES.iter().chain(&DISCRIMINATOR_PREFIXES).any(|p| n.starts_with(p))));
}
