//! Central finite-difference checks of every differentiable op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks d(Σ c·f(inputs))/d(inputs) against central differences.
fn check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let coef = random(g.shape(out), &mut rng);
    let grads = g.backward(&[(out, coef.clone())]);

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data().iter().zip(coef.data()).map(|(a, b)| a * b).sum()
    };

    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "input {k} element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(5)
}

#[test]
fn conv_stride_one_and_two() {
    let mut r = rng();
    let x = random(&[2, 2, 4, 5, 3], &mut r);
    let w = random(&[3, 2, 3, 3, 3], &mut r);
    let b = random(&[3], &mut r);
    check(&[x.clone(), w.clone(), b.clone()], |g, v| g.conv3d(v[0], v[1], Some(v[2]), 1, 1));
    check(&[x, w, b], |g, v| g.conv3d(v[0], v[1], Some(v[2]), 2, 1));
}

#[test]
fn conv_pointwise() {
    let mut r = rng();
    let x = random(&[1, 3, 2, 3, 2], &mut r);
    let w = random(&[2, 3, 1, 1, 1], &mut r);
    check(&[x, w], |g, v| g.conv3d(v[0], v[1], None, 1, 0));
}

#[test]
fn linear_and_softmax() {
    let mut r = rng();
    let x = random(&[3, 4], &mut r);
    let w = random(&[5, 4], &mut r);
    let b = random(&[5], &mut r);
    check(&[x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], Some(v[2]));
        g.softmax(y)
    });
}

#[test]
fn elementwise_ops() {
    let mut r = rng();
    // keep away from the kinks of leaky relu / clamp
    let mut a = random(&[2, 3, 2, 2, 2], &mut r);
    for v in a.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    let b = random(&[2, 3, 2, 2, 2], &mut r);
    check(&[a.clone(), b.clone()], |g, v| {
        let s = g.add(v[0], v[1]);
        let d = g.sub(s, v[1]);
        let m = g.mul(d, v[1]);
        let l = g.leaky_relu(m, 0.2);
        let e = g.exp(l);
        let t = g.tanh(e);
        let sg = g.sigmoid(t);
        let sc = g.scale(sg, 3.0);
        g.add_scalar(sc, 1.0)
    });
    check(&[a], |g, v| g.clamp(v[0], -0.5, 0.5));
}

#[test]
fn normalization_and_pooling() {
    let mut r = rng();
    let x = random(&[2, 3, 2, 3, 4], &mut r);
    check(&[x.clone()], |g, v| g.instance_norm(v[0], 1e-5));
    check(&[x.clone()], |g, v| g.mean_spatial(v[0]));
    check(&[x.clone()], |g, v| g.max_spatial(v[0]));
    check(&[x.clone()], |g, v| g.mean_channel(v[0]));
    check(&[x], |g, v| g.max_channel(v[0]));
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let x = random(&[1, 16, 2, 2, 3], &mut r);
    let gate = random(&[1, 16, 1, 1, 1], &mut r);
    let y = random(&[1, 2, 2, 2, 3], &mut r);
    check(&[x.clone(), gate], |g, v| g.mul_bcast(v[0], v[1]));
    check(&[x.clone(), y], |g, v| g.concat(&[v[1], v[0], v[1]]));
    check(&[x.clone()], |g, v| {
        let p = g.pixel_shuffle(v[0]);
        g.crop(p, [3, 4, 5])
    });
    check(&[x], |g, v| {
        let r = g.reshape(v[0], &[4, 4, 1, 2, 6]);
        g.mean_spatial(r)
    });
}

#[test]
fn pixel_shuffle_layout() {
    // channel sub-index (a, b, e) lands at offset (a, b, e) inside each 2x2x2 block
    let data: Vec<f64> = (0..8).map(|i| i as f64).collect();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(&[1, 8, 1, 1, 1], data));
    let y = g.pixel_shuffle(x);
    assert_eq!(g.shape(y), &[1, 1, 2, 2, 2]);
    assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
}

#[test]
fn conv_matches_direct_loop() {
    let mut r = rng();
    let x = random(&[1, 2, 5, 4, 3], &mut r);
    let w = random(&[2, 2, 3, 3, 3], &mut r);
    let mut g = Graph::new();
    let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
    let y = g.conv3d(xv, wv, None, 2, 1);
    let out = g.value(y);
    let os = out.shape().to_vec();
    assert_eq!(&os[2..], &[3, 2, 2]);
    let xs = x.shape();
    for co in 0..2 {
        for z in 0..os[2] {
            for yy in 0..os[3] {
                for xx in 0..os[4] {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for kd in 0..3 {
                            for kh in 0..3 {
                                for kw in 0..3 {
                                    let (iz, iy, ix) = (
                                        (2 * z + kd) as isize - 1,
                                        (2 * yy + kh) as isize - 1,
                                        (2 * xx + kw) as isize - 1,
                                    );
                                    if iz < 0 || iy < 0 || ix < 0 {
                                        continue;
                                    }
                                    let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                    if iz >= xs[2] || iy >= xs[3] || ix >= xs[4] {
                                        continue;
                                    }
                                    acc += w.data()[(((co * 2 + ci) * 3 + kd) * 3 + kh) * 3 + kw]
                                        * x.data()[((ci * xs[2] + iz) * xs[3] + iy) * xs[4] + ix];
                                }
                            }
                        }
                    }
                    let got = out.data()[((co * os[2] + z) * os[3] + yy) * os[4] + xx];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn permute_batch() {
    let mut r = rng();
    let x = random(&[3, 2, 2, 1, 2], &mut r);
    check(&[x.clone()], |g, v| g.permute_batch(v[0], &[2, 0, 1]));
    // a repeated index accumulates gradient twice
    check(&[x], |g, v| g.permute_batch(v[0], &[1, 1, 0]));
}
