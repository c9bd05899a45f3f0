use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::volume::{gaussian_blur, Volume};

/// Smoothness (voxels) of the random displacement field.
const FIELD_SIGMA: f64 = 3.0;

/// Dense smooth displacement field `(u_h, u_w, u_d)` whose largest vector
/// norm equals `magnitude` voxels.
pub fn displacement_field(shape: [usize; 3], magnitude: f64, seed: u64) -> [Vec<f32>; 3] {
    let n: usize = shape.iter().product();
    if magnitude <= 0.0 {
        return [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z as f32
                })
                .collect();
            let v = Volume::new(shape, data).expect("finite draws");
            gaussian_blur(&v, FIELD_SIGMA).data().iter().map(|&x| x as f64).collect()
        })
        .collect();
    let peak = (0..n)
        .map(|i| (comps[0][i].powi(2) + comps[1][i].powi(2) + comps[2][i].powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if peak > 0.0 { magnitude / peak } else { 0.0 };
    [0, 1, 2].map(|c| comps[c].iter().map(|&x| (x * scale) as f32).collect())
}

fn sample_trilinear(v: &Volume, p: [f64; 3]) -> f32 {
    let shape = v.shape();
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let x = p[a].clamp(0.0, (shape[a] - 1) as f64);
        let f = x.floor();
        base[a] = f as usize;
        frac[a] = x - f;
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let hi = (corner >> a) & 1 == 1;
            idx[a] = (base[a] + hi as usize).min(shape[a] - 1);
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        if w != 0.0 {
            acc += w * v.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc as f32
}

/// Warps `v` by a seeded smooth random displacement with trilinear
/// resampling. `magnitude == 0` returns the input unchanged.
pub fn elastic_augment(v: &Volume, magnitude: f64, seed: u64) -> Volume {
    if magnitude <= 0.0 {
        return v.clone();
    }
    let shape = v.shape();
    let field = displacement_field(shape, magnitude, seed);
    let mut out = v.clone();
    let data = out.data_mut();
    let mut idx = 0;
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let p = [
                    i as f64 + field[0][idx] as f64,
                    j as f64 + field[1][idx] as f64,
                    k as f64 + field[2][idx] as f64,
                ];
                data[idx] = sample_trilinear(v, p);
                idx += 1;
            }
        }
    }
    out.refresh_normalized();
    out
}
