//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse, seeded with externally computed loss gradients.

use std::collections::HashMap;

use super::conv::{col2im, im2col, ConvGeom};
use super::{matmul, Float, ParamId, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Tanh(Var),
    Clamp(Var, T, T),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    MeanSpatial(Var),
    MaxSpatial(Var, Vec<usize>),
    MeanChannel(Var),
    MaxChannel(Var, Vec<usize>),
    Reshape(Var),
    Expand(Var),
    Concat(Vec<Var>),
    PixelShuffle(Var),
    Crop(Var),
    Softmax(Var),
    PermuteBatch(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Float> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Float> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|n| self.leaves.get(n))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, n)| self.leaves.get(n).map(|t| (*id, t)))
    }
}

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

/// Calls `f(out_index, src_index)` for every element of `out_shape`, where
/// `src_shape` broadcasts to it (same rank, dims equal or 1).
fn for_each_broadcast(out_shape: &[usize], src_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    assert_eq!(out_shape.len(), src_shape.len(), "broadcast rank");
    let rank = out_shape.len();
    let mut src_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        assert!(
            src_shape[d] == out_shape[d] || src_shape[d] == 1,
            "cannot broadcast {src_shape:?} to {out_shape:?}"
        );
        src_strides[d] = if src_shape[d] == 1 { 0 } else { acc };
        acc *= src_shape[d];
    }
    let last = out_shape[rank - 1];
    let last_stride = src_strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank - 1];
    let mut out_i = 0;
    for _ in 0..outer {
        let base: usize = counter.iter().zip(&src_strides).map(|(c, s)| c * s).sum();
        for t in 0..last {
            f(out_i, base + t * last_stride);
            out_i += 1;
        }
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A trainable parameter. Repeated requests return the same node.
    pub fn param(&mut self, ps: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(ps.value(id).clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copies the value of `v` into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        assert_eq!(xs.len(), 5, "conv input must be [N,C,D,H,W]");
        assert_eq!(xs[1], wsh[1], "conv input channels");
        let (n, cout, k) = (xs[0], wsh[0], wsh[2]);
        let geom = ConvGeom::new(xs[1], k, stride, pad, [xs[2], xs[3], xs[4]]);
        let (rows, p) = (geom.rows(), geom.cols());
        let mut out = Tensor::zeros(&[n, cout, geom.output[0], geom.output[1], geom.output[2]]);
        let mut cols = vec![T::zero(); rows * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            let od = out.data_mut();
            for s in 0..n {
                im2col(&geom, &xv[s * geom.input_len()..(s + 1) * geom.input_len()], &mut cols);
                let o = &mut od[s * cout * p..(s + 1) * cout * p];
                matmul(cout, rows, p, wv, false, &cols, false, o, false);
                if let Some(bv) = bv {
                    for (c, chunk) in o.chunks_mut(p).enumerate() {
                        for v in chunk {
                            *v += bv[c];
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            out,
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// `x [N, in] · wᵀ [in, out] + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, wsh) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert_eq!(xs.len(), 2, "linear input must be [N, in]");
        assert_eq!(xs[1], wsh[1], "linear input width");
        let (n, fin, fout) = (xs[0], xs[1], wsh[0]);
        let mut out = Tensor::zeros(&[n, fout]);
        matmul(n, fin, fout, self.value(x).data(), false, self.value(w).data(), true, out.data_mut(), false);
        if let Some(b) = b {
            let bv = self.value(b).data().to_vec();
            for row in out.data_mut().chunks_mut(fout) {
                for (o, &bb) in row.iter_mut().zip(&bv) {
                    *o += bb;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    fn zip_same(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    /// `a * b` with `b` broadcast to the shape of `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let e = self.expand(b, &shape);
        self.mul(a, e)
    }

    /// `a + b` with `b` broadcast to the shape of `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let e = self.expand(b, &shape);
        self.add(a, e)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|x| x * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        let ng = self.ng(a);
        self.push(t, Op::LeakyRelu(a, slope), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        let ng = self.ng(a);
        self.push(t, Op::Exp(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.tanh());
        let ng = self.ng(a);
        self.push(t, Op::Tanh(a), ng)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let t = self.value(a).map(|x| x.max(lo).min(hi));
        let ng = self.ng(a);
        self.push(t, Op::Clamp(a, lo, hi), ng)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let m = spatial(&shape);
        let mut out = Tensor::zeros(&shape);
        let mut inv_std = Vec::with_capacity(shape[0] * shape[1]);
        let mf = T::from_usize(m).unwrap();
        for (src, dst) in xv.data().chunks(m).zip(out.data_mut().chunks_mut(m)) {
            let mean = src.iter().copied().sum::<T>() / mf;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
            let is = T::one() / (var + eps).sqrt();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Mean over spatial axes: `[N, C, ...] -> [N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, m) = (xv.shape()[0], xv.shape()[1], spatial(xv.shape()));
        let mf = T::from_usize(m).unwrap();
        let data = xv.data().chunks(m).map(|ch| ch.iter().copied().sum::<T>() / mf).collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::MeanSpatial(x), ng)
    }

    /// Max over spatial axes: `[N, C, ...] -> [N, C]`.
    pub fn max_spatial(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, m) = (xv.shape()[0], xv.shape()[1], spatial(xv.shape()));
        let mut arg = Vec::with_capacity(n * c);
        let mut data = Vec::with_capacity(n * c);
        for (ci, ch) in xv.data().chunks(m).enumerate() {
            let (mut bi, mut bv) = (0, ch[0]);
            for (i, &v) in ch.iter().enumerate().skip(1) {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            arg.push(ci * m + bi);
            data.push(bv);
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::MaxSpatial(x, arg), ng)
    }

    /// Mean over channels: `[N, C, D, H, W] -> [N, 1, D, H, W]`.
    pub fn mean_channel(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        let (n, c, m) = (shape[0], shape[1], spatial(&shape));
        shape[1] = 1;
        let cf = T::from_usize(c).unwrap();
        let mut out = Tensor::zeros(&shape);
        for s in 0..n {
            let o = &mut out.data_mut()[s * m..(s + 1) * m];
            for ch in 0..c {
                let src = &xv.data()[(s * c + ch) * m..(s * c + ch + 1) * m];
                for (d, &v) in o.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for d in o.iter_mut() {
                *d /= cf;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MeanChannel(x), ng)
    }

    /// Max over channels: `[N, C, D, H, W] -> [N, 1, D, H, W]`.
    pub fn max_channel(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut shape = xv.shape().to_vec();
        let (n, c, m) = (shape[0], shape[1], spatial(&shape));
        shape[1] = 1;
        let mut out = Tensor::zeros(&shape);
        let mut arg = vec![0usize; n * m];
        for s in 0..n {
            for i in 0..m {
                let (mut bi, mut bv) = (0, xv.data()[s * c * m + i]);
                for ch in 1..c {
                    let v = xv.data()[(s * c + ch) * m + i];
                    if v > bv {
                        bi = ch;
                        bv = v;
                    }
                }
                out.data_mut()[s * m + i] = bv;
                arg[s * m + i] = (s * c + bi) * m + i;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxChannel(x, arg), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    /// Broadcasts size-1 axes of `x` up to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        if xv.shape() == shape {
            return x;
        }
        let mut out = Tensor::zeros(shape);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for_each_broadcast(shape, xv.shape(), |o, s| dst[o] = src[s]);
        }
        let ng = self.ng(x);
        self.push(out, Op::Expand(x), ng)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let (n, m) = (first[0], spatial(&first));
        let cs: Vec<usize> = xs.iter().map(|&v| self.shape(v)[1]).collect();
        let total: usize = cs.iter().sum();
        let mut shape = first.clone();
        shape[1] = total;
        let mut data = Vec::with_capacity(n * total * m);
        for s in 0..n {
            for (&v, &c) in xs.iter().zip(&cs) {
                let t = self.value(v);
                assert_eq!(t.shape()[0], n, "concat batch");
                assert_eq!(t.shape()[2..], first[2..], "concat spatial");
                data.extend_from_slice(&t.data()[s * c * m..(s + 1) * c * m]);
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(Tensor::from_vec(&shape, data), Op::Concat(xs.to_vec()), ng)
    }

    /// `[N, 8C, D, H, W] -> [N, C, 2D, 2H, 2W]`.
    pub fn pixel_shuffle(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert_eq!(s[1] % 8, 0, "pixel shuffle needs a multiple of 8 channels");
        let (n, c, d, h, w) = (s[0], s[1] / 8, s[2], s[3], s[4]);
        let mut out = Tensor::zeros(&[n, c, 2 * d, 2 * h, 2 * w]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for (si, di) in shuffle_pairs(n, c, d, h, w) {
                dst[di] = src[si];
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::PixelShuffle(x), ng)
    }

    /// Keeps the leading `size` voxels along each spatial axis.
    pub fn crop(&mut self, x: Var, size: [usize; 3]) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        if s[2..] == size {
            return x;
        }
        assert!(size[0] <= s[2] && size[1] <= s[3] && size[2] <= s[4], "crop larger than input");
        let mut out = Tensor::zeros(&[s[0], s[1], size[0], size[1], size[2]]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for (si, di) in crop_pairs(&s, size) {
                dst[di] = src[si];
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Crop(x), ng)
    }

    /// Reorders batch items: output item `i` is input item `perm[i]`.
    pub fn permute_batch(&mut self, x: Var, perm: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[0];
        assert_eq!(perm.len(), n, "permutation length");
        let m = xv.len() / n;
        let mut data = Vec::with_capacity(xv.len());
        for &p in perm {
            data.extend_from_slice(&xv.data()[p * m..(p + 1) * m]);
        }
        let t = Tensor::from_vec(xv.shape(), data);
        let ng = self.ng(x);
        self.push(t, Op::PermuteBatch(x, perm.to_vec()), ng)
    }

    /// Softmax over the last axis of a `[N, K]` tensor.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let k = *xv.shape().last().unwrap();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(k) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Reverse pass seeded with `dL/dv` for each `(v, grad)`.
    pub fn backward(&self, seeds: &[(Var, Tensor<T>)]) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.shape(*v), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
        }
        let mut leaves = HashMap::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf | Op::Param => {
                    leaves.insert(i, g);
                }
                op => self.backward_op(op, &node.value, g, &mut grads),
            }
        }
        let params = self.params.iter().map(|(id, v)| (*id, v.0)).collect();
        Gradients { leaves, params }
    }

    fn backward_op(&self, op: &Op<T>, y: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf | Op::Param => unreachable!(),
            Op::Conv {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let xs = xv.shape();
                let (n, cout) = (xs[0], wv.shape()[0]);
                let geom = ConvGeom::new(xs[1], wv.shape()[2], *stride, *pad, [xs[2], xs[3], xs[4]]);
                let (rows, p, il) = (geom.rows(), geom.cols(), geom.input_len());
                let mut cols = vec![T::zero(); rows * p];
                let mut gcols = vec![T::zero(); rows * p];
                let mut gw = want(*w).then(|| Tensor::zeros(wv.shape()));
                let mut gx = want(*x).then(|| Tensor::zeros(xs));
                for s in 0..n {
                    let go = &g.data()[s * cout * p..(s + 1) * cout * p];
                    if let Some(gw) = gw.as_mut() {
                        im2col(&geom, &xv.data()[s * il..(s + 1) * il], &mut cols);
                        matmul(cout, p, rows, go, false, &cols, true, gw.data_mut(), true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        matmul(rows, cout, p, wv.data(), true, go, false, &mut gcols, false);
                        col2im(&geom, &gcols, &mut gx.data_mut()[s * il..(s + 1) * il]);
                    }
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut gb = Tensor::zeros(&[cout]);
                    for s in 0..n {
                        for c in 0..cout {
                            let off = (s * cout + c) * p;
                            gb.data_mut()[c] += g.data()[off..off + p].iter().copied().sum::<T>();
                        }
                    }
                    accumulate(grads, b, gb);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *w, gw);
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (n, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                if want(*x) {
                    let mut gx = Tensor::zeros(xv.shape());
                    matmul(n, fout, fin, g.data(), false, wv.data(), false, gx.data_mut(), false);
                    accumulate(grads, *x, gx);
                }
                if want(*w) {
                    let mut gw = Tensor::zeros(wv.shape());
                    matmul(fout, n, fin, g.data(), true, xv.data(), false, gw.data_mut(), false);
                    accumulate(grads, *w, gw);
                }
                if let Some(b) = b.filter(|b| want(*b)) {
                    let mut gb = Tensor::zeros(&[fout]);
                    for row in g.data().chunks(fout) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::Add(a, b) => {
                if want(*b) {
                    accumulate(grads, *b, g.clone());
                }
                if want(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Sub(a, b) => {
                if want(*b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
                if want(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    accumulate(grads, *a, zip(&g, val(*b), |gv, bv| gv * bv));
                }
                if want(*b) {
                    accumulate(grads, *b, zip(&g, val(*a), |gv, av| gv * av));
                }
            }
            Op::AddScalar(a) => accumulate(grads, *a, g),
            Op::Scale(a, s) => {
                let s = *s;
                accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let gx = zip(&g, val(*a), |gv, xv| if xv > T::zero() { gv } else { gv * slope });
                accumulate(grads, *a, gx);
            }
            Op::Sigmoid(a) => accumulate(grads, *a, zip(&g, y, |gv, yv| gv * yv * (T::one() - yv))),
            Op::Exp(a) => accumulate(grads, *a, zip(&g, y, |gv, yv| gv * yv)),
            Op::Tanh(a) => accumulate(grads, *a, zip(&g, y, |gv, yv| gv * (T::one() - yv * yv))),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = zip(&g, val(*a), |gv, xv| if xv > lo && xv < hi { gv } else { T::zero() });
                accumulate(grads, *a, gx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let m = spatial(y.shape());
                let mf = T::from_usize(m).unwrap();
                let mut gx = Tensor::zeros(y.shape());
                for (((gs, ys), dst), &is) in g
                    .data()
                    .chunks(m)
                    .zip(y.data().chunks(m))
                    .zip(gx.data_mut().chunks_mut(m))
                    .zip(inv_std)
                {
                    let mg = gs.iter().copied().sum::<T>() / mf;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / mf;
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gs).zip(ys) {
                        *d = is * (gv - mg - yv * mgy);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanSpatial(x) => {
                let xs = val(*x).shape();
                let m = spatial(xs);
                let mf = T::from_usize(m).unwrap();
                let mut gx = Tensor::zeros(xs);
                for (dst, &gv) in gx.data_mut().chunks_mut(m).zip(g.data()) {
                    dst.fill(gv / mf);
                }
                accumulate(grads, *x, gx);
            }
            Op::MaxSpatial(x, arg) | Op::MaxChannel(x, arg) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    gx.data_mut()[a] += gv;
                }
                accumulate(grads, *x, gx);
            }
            Op::MeanChannel(x) => {
                let xs = val(*x).shape();
                let (n, c, m) = (xs[0], xs[1], spatial(xs));
                let cf = T::from_usize(c).unwrap();
                let mut gx = Tensor::zeros(xs);
                for s in 0..n {
                    let gs = &g.data()[s * m..(s + 1) * m];
                    for ch in 0..c {
                        let dst = &mut gx.data_mut()[(s * c + ch) * m..(s * c + ch + 1) * m];
                        for (d, &gv) in dst.iter_mut().zip(gs) {
                            *d = gv / cf;
                        }
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                accumulate(grads, *x, g.reshaped(&shape));
            }
            Op::Expand(x) => {
                let xs = val(*x).shape();
                let mut gx = Tensor::zeros(xs);
                {
                    let dst = gx.data_mut();
                    let src = g.data();
                    for_each_broadcast(y.shape(), xs, |o, s| dst[s] += src[o]);
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat(xs) => {
                let (n, m) = (y.shape()[0], spatial(y.shape()));
                let total = y.shape()[1];
                let mut off = 0;
                for &v in xs {
                    let c = val(v).shape()[1];
                    if want(v) {
                        let mut gx = Tensor::zeros(val(v).shape());
                        for s in 0..n {
                            let src = &g.data()[(s * total + off) * m..(s * total + off + c) * m];
                            gx.data_mut()[s * c * m..(s + 1) * c * m].copy_from_slice(src);
                        }
                        accumulate(grads, v, gx);
                    }
                    off += c;
                }
            }
            Op::PixelShuffle(x) => {
                let s = val(*x).shape();
                let mut gx = Tensor::zeros(s);
                for (si, di) in shuffle_pairs(s[0], s[1] / 8, s[2], s[3], s[4]) {
                    gx.data_mut()[si] = g.data()[di];
                }
                accumulate(grads, *x, gx);
            }
            Op::Crop(x) => {
                let s = val(*x).shape();
                let size = [y.shape()[2], y.shape()[3], y.shape()[4]];
                let mut gx = Tensor::zeros(s);
                for (si, di) in crop_pairs(s, size) {
                    gx.data_mut()[si] = g.data()[di];
                }
                accumulate(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let k = *y.shape().last().unwrap();
                let mut gx = Tensor::zeros(y.shape());
                for ((dst, gs), ys) in gx.data_mut().chunks_mut(k).zip(g.data().chunks(k)).zip(y.data().chunks(k)) {
                    let dot = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>();
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gs).zip(ys) {
                        *d = yv * (gv - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::PermuteBatch(x, perm) => {
                let m = y.len() / perm.len();
                let mut gx = Tensor::zeros(y.shape());
                for (i, &p) in perm.iter().enumerate() {
                    let src = &g.data()[i * m..(i + 1) * m];
                    for (d, &v) in gx.data_mut()[p * m..(p + 1) * m].iter_mut().zip(src) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, gx);
            }
        }
    }
}

fn zip<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_vec(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

/// `(source, destination)` flat index pairs of a 2x pixel shuffle.
fn shuffle_pairs(n: usize, c: usize, d: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let m = d * h * w;
    let (od, oh, ow) = (2 * d, 2 * h, 2 * w);
    (0..n).flat_map(move |s| {
        (0..c).flat_map(move |ch| {
            (0..8).flat_map(move |sub| {
                let (a, b, e) = (sub / 4, (sub / 2) % 2, sub % 2);
                let src_base = ((s * c + ch) * 8 + sub) * m;
                let dst_base = (s * c + ch) * od * oh * ow;
                (0..m).map(move |i| {
                    let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
                    let dst = dst_base + ((2 * z + a) * oh + 2 * y + b) * ow + 2 * x + e;
                    (src_base + i, dst)
                })
            })
        })
    })
}

fn crop_pairs(s: &[usize], size: [usize; 3]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let nc = s[0] * s[1];
    (0..nc).flat_map(move |b| {
        (0..size[0]).flat_map(move |z| {
            (0..size[1]).flat_map(move |y| {
                (0..size[2]).map(move |x| {
                    let src = ((b * s[2] + z) * s[3] + y) * s[4] + x;
                    let dst = ((b * size[0] + z) * size[1] + y) * size[2] + x;
                    (src, dst)
                })
            })
        })
    })
}
