use super::Volume;

/// Normalized 1D Gaussian taps with radius `ceil(3σ)`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r).map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Mirror index into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

fn blur_axis(data: &mut [f64], shape: [usize; 3], axis: usize, kernel: &[f64]) {
    let r = (kernel.len() / 2) as isize;
    let strides = [shape[1] * shape[2], shape[2], 1];
    let n = shape[axis];
    let stride = strides[axis];
    let mut line = vec![0.0; n];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    for p in 0..shape[others[0]] {
        for q in 0..shape[others[1]] {
            let base = p * strides[others[0]] + q * strides[others[1]];
            for (t, slot) in line.iter_mut().enumerate() {
                *slot = data[base + t * stride];
            }
            for t in 0..n {
                let mut acc = 0.0;
                for (o, w) in kernel.iter().enumerate() {
                    acc += w * line[reflect(t as isize + o as isize - r, n)];
                }
                data[base + t * stride] = acc;
            }
        }
    }
}

/// Separable Gaussian smoothing with reflected borders. `sigma <= 0` copies.
pub fn gaussian_blur(v: &Volume, sigma: f64) -> Volume {
    if sigma <= 0.0 {
        return v.clone();
    }
    let shape = v.shape();
    let kernel = gaussian_kernel(sigma);
    let mut data: Vec<f64> = v.data().iter().map(|&x| x as f64).collect();
    for axis in 0..3 {
        blur_axis(&mut data, shape, axis, &kernel);
    }
    let mut out = Volume::new(shape, data.into_iter().map(|x| x as f32).collect())
        .expect("blur of a finite volume is finite");
    out.meta = v.meta.clone();
    out
}
