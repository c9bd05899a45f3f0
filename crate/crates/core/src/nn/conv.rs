//! im2col / col2im for 3D convolution with cubic kernels.

use super::Float;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(cin: usize, k: usize, stride: usize, pad: usize, input: [usize; 3]) -> Self {
        let out = |n: usize| (n + 2 * pad - k) / stride + 1;
        Self {
            cin,
            k,
            stride,
            pad,
            input,
            output: [out(input[0]), out(input[1]), out(input[2])],
        }
    }

    pub fn rows(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.output.iter().product()
    }

    pub fn input_len(&self) -> usize {
        self.cin * self.input.iter().product::<usize>()
    }

    #[inline]
    fn source(&self, o: usize, kk: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Fills `cols` (`rows × cols`) from one sample's input `[Cin, D, H, W]`.
pub(crate) fn im2col<T: Float>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let p = g.cols();
    let k = g.k;
    let mut row = 0;
    for c in 0..g.cin {
        let xc = &x[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let dst = &mut cols[row * p..(row + 1) * p];
                    let mut n = 0;
                    for z in 0..od {
                        let sz = g.source(z, kd, id);
                        for y in 0..oh {
                            let sy = g.source(y, kh, ih);
                            match (sz, sy) {
                                (Some(sz), Some(sy)) => {
                                    let base = (sz * ih + sy) * iw;
                                    for x_ in 0..ow {
                                        dst[n] = match g.source(x_, kw, iw) {
                                            Some(sx) => xc[base + sx],
                                            None => T::zero(),
                                        };
                                        n += 1;
                                    }
                                }
                                _ => {
                                    dst[n..n + ow].fill(T::zero());
                                    n += ow;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into one sample's input gradient.
pub(crate) fn col2im<T: Float>(g: &ConvGeom, cols: &[T], gx: &mut [T]) {
    let [id, ih, iw] = g.input;
    let [od, oh, ow] = g.output;
    let p = g.cols();
    let k = g.k;
    let mut row = 0;
    for c in 0..g.cin {
        let gc = &mut gx[c * id * ih * iw..(c + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let src = &cols[row * p..(row + 1) * p];
                    let mut n = 0;
                    for z in 0..od {
                        let sz = g.source(z, kd, id);
                        for y in 0..oh {
                            let sy = g.source(y, kh, ih);
                            if let (Some(sz), Some(sy)) = (sz, sy) {
                                let base = (sz * ih + sy) * iw;
                                for x_ in 0..ow {
                                    if let Some(sx) = g.source(x_, kw, iw) {
                                        gc[base + sx] += src[n];
                                    }
                                    n += 1;
                                }
                            } else {
                                n += ow;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
