//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`GraphOf`] records every operation of one forward pass. Nodes created from
//! trainable leaves carry `requires_grad`; [`GraphOf::backward`] walks the tape in
//! reverse and returns gradients for every leaf that requires them. Shape
//! errors inside the graph are programming errors and panic; public model APIs
//! validate their inputs before building graphs.
//!
//! Binary elementwise ops broadcast between operands of equal rank where each
//! axis either matches or is 1 on one side.
//!
//! [`Graph`] computes in `f32`. `GraphOf<f64>` runs the same ops in double
//! precision; inputs and parameters still arrive as `f32` tensors and are
//! widened on entry.

use crate::kernels::{
    broadcast_shape, broadcast_strides, col2im, for_each_broadcast, gemm, im2col, ConvGeom,
};
use crate::real::Real;
use crate::tensor::{Array, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<R> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    Offset(Var),
    LeakyRelu(Var, R),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    Rsqrt(Var),
    Clamp(Var, R, R),
    Linear(Var, Var),
    Conv2d { x: Var, w: Var, pad: usize },
    Deconv2x2(Var, Var),
    AvgPool(Var, usize),
    Upsample2x(Var),
    Reshape(Var),
    SliceChannels { x: Var, start: usize },
    SumLastAxis(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<R> {
    value: Array<R>,
    op: Op<R>,
    requires_grad: bool,
}

pub struct GraphOf<R> {
    nodes: Vec<Node<R>>,
}

pub type Graph = GraphOf<f32>;

impl<R> Default for GraphOf<R> {
    fn default() -> Self {
        Self { nodes: Vec::new() }
    }
}

/// Gradients of one backward pass, indexed by leaf.
pub struct Gradients<R = f32> {
    grads: Vec<Option<Array<R>>>,
}

impl<R> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Array<R>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array<R>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<R: Real> GraphOf<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<R>, op: Op<R>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.constant_real(R::from_tensor(t))
    }

    /// Input whose gradient is reported by [`GraphOf::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.leaf_real(R::from_tensor(t))
    }

    pub fn constant_real(&mut self, t: Array<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf_real(&mut self, t: Array<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Array<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<R>, f: impl Fn(R, R) -> R) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Array::from_parts(ta.shape().to_vec(), data)
        } else {
            let out = broadcast_shape(ta.shape(), tb.shape());
            let sa = broadcast_strides(ta.shape(), &out);
            let sb = broadcast_strides(tb.shape(), &out);
            let mut data = vec![R::zero(); out.iter().product()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(&out, &sa, &sb, |i, ia, ib| data[i] = f(da[ia], db[ib]));
            Array::from_parts(out, data)
        };
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn unary(&mut self, a: Var, op: Op<R>, f: impl Fn(R) -> R) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let s = R::of_f32(s);
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let c = R::of_f32(c);
        self.unary(a, Op::Offset(a), |x| x + c)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f32) -> Var {
        let slope = R::of_f32(slope);
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > R::zero() { x } else { slope * x })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Op::Abs(a), R::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `x^(-1/2)`; callers keep `x` positive.
    pub fn rsqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Rsqrt(a), |x| x.sqrt().recip())
    }

    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let (lo, hi) = (R::of_f32(lo), R::of_f32(hi));
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    /// `x (B, in) · wᵀ` with `w (out, in)`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let (b, input) = dims2(tx.shape());
        let (out, in2) = dims2(tw.shape());
        assert_eq!(input, in2, "linear: input width {input} vs weight {:?}", tw.shape());
        let mut data = vec![R::zero(); b * out];
        gemm(b, input, out, tx.data(), (input, 1), tw.data(), (1, input), &mut data, R::zero());
        let rg = self.rg(x) || self.rg(w);
        self.push(Array::from_parts(vec![b, out], data), Op::Linear(x, w), rg)
    }

    /// Stride-1 convolution of `x (B, I, H, W)` with `w (O, I, K, K)` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let [b, i, h, wd] = dims4(tx.shape());
        let [o, i2, k, k2] = dims4(tw.shape());
        assert!(i == i2 && k == k2, "conv2d: input {:?} vs weight {:?}", tx.shape(), tw.shape());
        let g = ConvGeom::new(i, h, wd, k, pad);
        let (rows, cols) = (g.col_rows(), g.col_cols());
        let mut out = vec![R::zero(); b * o * cols];
        let mut col = vec![R::zero(); rows * cols];
        let in_plane = i * h * wd;
        for s in 0..b {
            let xs = &tx.data()[s * in_plane..(s + 1) * in_plane];
            let src: &[R] = if k == 1 && pad == 0 {
                xs
            } else {
                im2col(xs, &g, &mut col);
                &col
            };
            gemm(o, rows, cols, tw.data(), (rows, 1), src, (cols, 1), &mut out[s * o * cols..(s + 1) * o * cols], R::zero());
        }
        let rg = self.rg(x) || self.rg(w);
        let value = Array::from_parts(vec![b, o, g.out_h, g.out_w], out);
        self.push(value, Op::Conv2d { x, w, pad }, rg)
    }

    /// Learned ×2 upsampling: transposed convolution with kernel 2 and stride 2,
    /// `w (I, O, 2, 2)`.
    pub fn deconv2x2(&mut self, x: Var, w: Var) -> Var {
        let (tx, tw) = (self.value(x), self.value(w));
        let [b, i, h, wd] = dims4(tx.shape());
        let [i2, o, k1, k2] = dims4(tw.shape());
        assert!(i == i2 && k1 == 2 && k2 == 2, "deconv2x2: input {:?} vs weight {:?}", tx.shape(), tw.shape());
        let hw = h * wd;
        let o4 = o * 4;
        let mut tmp = vec![R::zero(); o4 * hw];
        let mut out = vec![R::zero(); b * o * 4 * hw];
        for s in 0..b {
            let xs = &tx.data()[s * i * hw..(s + 1) * i * hw];
            gemm(o4, i, hw, tw.data(), (1, o4), xs, (hw, 1), &mut tmp, R::zero());
            let ys = &mut out[s * o4 * hw..(s + 1) * o4 * hw];
            for oc in 0..o {
                for a in 0..2 {
                    for c in 0..2 {
                        let row = &tmp[((oc * 2 + a) * 2 + c) * hw..][..hw];
                        for y in 0..h {
                            for x in 0..wd {
                                ys[(oc * 2 * h + 2 * y + a) * 2 * wd + 2 * x + c] = row[y * wd + x];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w);
        self.push(Array::from_parts(vec![b, o, 2 * h, 2 * wd], out), Op::Deconv2x2(x, w), rg)
    }

    /// Non-overlapping `k × k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let tx = self.value(x);
        let [b, c, h, w] = dims4(tx.shape());
        assert!(h % k == 0 && w % k == 0, "avg_pool: {h}x{w} not divisible by {k}");
        let (oh, ow) = (h / k, w / k);
        let inv = R::of_f64(1.0 / (k * k) as f64);
        let mut out = vec![R::zero(); b * c * oh * ow];
        for p in 0..b * c {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for y in 0..h {
                let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
                for (x, v) in src[y * w..(y + 1) * w].iter().enumerate() {
                    drow[x / k] += *v;
                }
            }
            dst.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        self.push(Array::from_parts(vec![b, c, oh, ow], out), Op::AvgPool(x, k), rg)
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let [b, c, h, w] = dims4(tx.shape());
        let mut out = vec![R::zero(); b * c * 4 * h * w];
        for p in 0..b * c {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(Array::from_parts(vec![b, c, 2 * h, 2 * w], out), Op::Upsample2x(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let rg = self.rg(x);
        self.push(value, Op::Reshape(x), rg)
    }

    /// Channels `start..start + len` of a `(B, C, …)` tensor.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let shape = tx.shape();
        assert!(shape.len() >= 2 && start + len <= shape[1], "slice_channels out of range");
        let inner: usize = shape[2..].iter().product();
        let c = shape[1];
        let mut data = Vec::with_capacity(shape[0] * len * inner);
        for s in 0..shape[0] {
            data.extend_from_slice(&tx.data()[(s * c + start) * inner..(s * c + start + len) * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[1] = len;
        let rg = self.rg(x);
        self.push(Array::from_parts(out_shape, data), Op::SliceChannels { x, start }, rg)
    }

    /// Sums away the last axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let shape = tx.shape();
        assert!(shape.len() >= 2, "sum_last_axis needs rank >= 2");
        let n = *shape.last().unwrap();
        let data = tx
            .data()
            .chunks_exact(n)
            .map(|c| R::of_f64(c.iter().map(|v| v.as_f64()).sum::<f64>()))
            .collect();
        let rg = self.rg(x);
        self.push(Array::from_parts(shape[..shape.len() - 1].to_vec(), data), Op::SumLastAxis(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(x);
        self.push(Array::scalar(R::of_f64(s)), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: f64 = t.data().iter().map(|v| v.as_f64()).sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        self.push(Array::scalar(R::of_f64(s)), Op::Mean(x), rg)
    }

    /// Gradients of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Gradients<R> {
        let seed = Array::ones(self.shape(root));
        self.backward_with(root, seed)
    }

    /// Vector-Jacobian product with `seed` as the upstream gradient of `root`.
    pub fn backward_with(&self, root: Var, seed: Array<R>) -> Gradients<R> {
        assert_eq!(seed.shape(), self.shape(root), "seed shape must match root");
        let mut grads: Vec<Option<Array<R>>> = (0..=root.0).map(|_| None).collect();
        if self.rg(root) {
            grads[root.0] = Some(seed);
        }
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array<R>>], v: Var, g: Array<R>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += *x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node<R>, g: Array<R>, grads: &mut [Option<Array<R>>]) {
        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, reduce_to(&g, self.shape(a)));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, reduce_to(&g, self.shape(b)));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, reduce_to(&g, self.shape(a)));
                }
                if self.rg(b) {
                    let neg = reduce_to(&g, self.shape(b)).map(|v| -v);
                    self.accumulate(grads, b, neg);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let ga = mul_reduce(&g, self.value(b), self.shape(a));
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = mul_reduce(&g, self.value(a), self.shape(b));
                    self.accumulate(grads, b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            Op::Offset(a) | Op::Reshape(a) => {
                let shaped = Array::from_parts(self.shape(a).to_vec(), g.into_data());
                self.accumulate(grads, a, shaped);
            }
            Op::LeakyRelu(a, slope) => {
                let ga = zip_map(&g, self.value(a), |gv, x| if x > R::zero() { gv } else { gv * slope });
                self.accumulate(grads, a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_map(&g, self.value(a), |gv, x| gv * sigmoid(x));
                self.accumulate(grads, a, ga);
            }
            Op::Abs(a) => {
                let ga = zip_map(&g, self.value(a), |gv, x| gv * sign(x));
                self.accumulate(grads, a, ga);
            }
            Op::Square(a) => {
                let ga = zip_map(&g, self.value(a), |gv, x| (gv + gv) * x);
                self.accumulate(grads, a, ga);
            }
            Op::Rsqrt(a) => {
                let ga = zip_map(&g, &node.value, |gv, y| R::of_f32(-0.5) * gv * y * y * y);
                self.accumulate(grads, a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let ga = zip_map(&g, self.value(a), |gv, x| if x >= lo && x <= hi { gv } else { R::zero() });
                self.accumulate(grads, a, ga);
            }
            Op::Linear(x, w) => self.backprop_linear(x, w, &g, grads),
            Op::Conv2d { x, w, pad } => self.backprop_conv(x, w, pad, &g, grads),
            Op::Deconv2x2(x, w) => self.backprop_deconv(x, w, &g, grads),
            Op::AvgPool(x, k) => {
                let [b, c, h, w] = dims4(self.shape(x));
                let (oh, ow) = (h / k, w / k);
                let inv = R::of_f64(1.0 / (k * k) as f64);
                let mut gx = vec![R::zero(); b * c * h * w];
                for p in 0..b * c {
                    let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            dst[y * w + xx] = src[(y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                self.accumulate(grads, x, Array::from_parts(vec![b, c, h, w], gx));
            }
            Op::Upsample2x(x) => {
                let [b, c, h, w] = dims4(self.shape(x));
                let mut gx = vec![R::zero(); b * c * h * w];
                for p in 0..b * c {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, x, Array::from_parts(vec![b, c, h, w], gx));
            }
            Op::SliceChannels { x, start } => {
                let shape = self.shape(x).to_vec();
                let inner: usize = shape[2..].iter().product();
                let (c, len) = (shape[1], g.shape()[1]);
                let mut gx = vec![R::zero(); shape.iter().product()];
                for s in 0..shape[0] {
                    gx[(s * c + start) * inner..(s * c + start + len) * inner]
                        .copy_from_slice(&g.data()[s * len * inner..(s + 1) * len * inner]);
                }
                self.accumulate(grads, x, Array::from_parts(shape, gx));
            }
            Op::SumLastAxis(x) => {
                let shape = self.shape(x).to_vec();
                let n = *shape.last().unwrap();
                let gx = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.accumulate(grads, x, Array::from_parts(shape, gx));
            }
            Op::Sum(x) => {
                let gx = Array::full(self.shape(x), g.item());
                self.accumulate(grads, x, gx);
            }
            Op::Mean(x) => {
                let n = R::of_f64(self.value(x).numel() as f64);
                let gx = Array::full(self.shape(x), g.item() / n);
                self.accumulate(grads, x, gx);
            }
        }
    }

    fn backprop_linear(&self, x: Var, w: Var, g: &Array<R>, grads: &mut [Option<Array<R>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let (b, input) = dims2(tx.shape());
        let out = tw.shape()[0];
        if self.rg(x) {
            let mut gx = vec![R::zero(); b * input];
            gemm(b, out, input, g.data(), (out, 1), tw.data(), (input, 1), &mut gx, R::zero());
            self.accumulate(grads, x, Array::from_parts(vec![b, input], gx));
        }
        if self.rg(w) {
            let mut gw = vec![R::zero(); out * input];
            gemm(out, b, input, g.data(), (1, out), tx.data(), (input, 1), &mut gw, R::zero());
            self.accumulate(grads, w, Array::from_parts(vec![out, input], gw));
        }
    }

    fn backprop_conv(&self, x: Var, w: Var, pad: usize, g: &Array<R>, grads: &mut [Option<Array<R>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let [b, i, h, wd] = dims4(tx.shape());
        let [o, _, k, _] = dims4(tw.shape());
        let geom = ConvGeom::new(i, h, wd, k, pad);
        let (rows, cols) = (geom.col_rows(), geom.col_cols());
        let direct = k == 1 && pad == 0;
        let in_plane = i * h * wd;
        let mut col = vec![R::zero(); if direct { 0 } else { rows * cols }];
        let mut gcol = vec![R::zero(); if direct { 0 } else { rows * cols }];
        let mut gx = if self.rg(x) { vec![R::zero(); b * in_plane] } else { Vec::new() };
        let mut gw = if self.rg(w) { vec![R::zero(); o * rows] } else { Vec::new() };
        for s in 0..b {
            let gs = &g.data()[s * o * cols..(s + 1) * o * cols];
            if self.rg(w) {
                let xs = &tx.data()[s * in_plane..(s + 1) * in_plane];
                let src: &[R] = if direct {
                    xs
                } else {
                    im2col(xs, &geom, &mut col);
                    &col
                };
                gemm(o, cols, rows, gs, (cols, 1), src, (1, cols), &mut gw, R::one());
            }
            if self.rg(x) {
                let dst = &mut gx[s * in_plane..(s + 1) * in_plane];
                if direct {
                    gemm(rows, o, cols, tw.data(), (1, rows), gs, (cols, 1), dst, R::zero());
                } else {
                    gemm(rows, o, cols, tw.data(), (1, rows), gs, (cols, 1), &mut gcol, R::zero());
                    col2im(&gcol, &geom, dst);
                }
            }
        }
        if self.rg(x) {
            self.accumulate(grads, x, Array::from_parts(tx.shape().to_vec(), gx));
        }
        if self.rg(w) {
            self.accumulate(grads, w, Array::from_parts(tw.shape().to_vec(), gw));
        }
    }

    fn backprop_deconv(&self, x: Var, w: Var, g: &Array<R>, grads: &mut [Option<Array<R>>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let [b, i, h, wd] = dims4(tx.shape());
        let o = tw.shape()[1];
        let hw = h * wd;
        let o4 = o * 4;
        let mut gathered = vec![R::zero(); o4 * hw];
        let mut gx = if self.rg(x) { vec![R::zero(); b * i * hw] } else { Vec::new() };
        let mut gw = if self.rg(w) { vec![R::zero(); i * o4] } else { Vec::new() };
        for s in 0..b {
            let gs = &g.data()[s * o4 * hw..(s + 1) * o4 * hw];
            for oc in 0..o {
                for a in 0..2 {
                    for c in 0..2 {
                        let row = &mut gathered[((oc * 2 + a) * 2 + c) * hw..][..hw];
                        for y in 0..h {
                            for xx in 0..wd {
                                row[y * wd + xx] = gs[(oc * 2 * h + 2 * y + a) * 2 * wd + 2 * xx + c];
                            }
                        }
                    }
                }
            }
            if self.rg(x) {
                gemm(i, o4, hw, tw.data(), (o4, 1), &gathered, (hw, 1), &mut gx[s * i * hw..(s + 1) * i * hw], R::zero());
            }
            if self.rg(w) {
                let xs = &tx.data()[s * i * hw..(s + 1) * i * hw];
                gemm(i, hw, o4, xs, (hw, 1), &gathered, (1, hw), &mut gw, R::one());
            }
        }
        if self.rg(x) {
            self.accumulate(grads, x, Array::from_parts(tx.shape().to_vec(), gx));
        }
        if self.rg(w) {
            self.accumulate(grads, w, Array::from_parts(tw.shape().to_vec(), gw));
        }
    }
}

pub fn softplus<R: Real>(x: R) -> R {
    x.max(R::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        (R::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

fn sign<R: Real>(x: R) -> R {
    if x > R::zero() {
        R::one()
    } else if x < R::zero() {
        -R::one()
    } else {
        R::zero()
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected rank-2 tensor, got {shape:?}");
    (shape[0], shape[1])
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    assert_eq!(shape.len(), 4, "expected rank-4 tensor, got {shape:?}");
    [shape[0], shape[1], shape[2], shape[3]]
}

fn zip_map<R: Real>(g: &Array<R>, x: &Array<R>, f: impl Fn(R, R) -> R) -> Array<R> {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Array::from_parts(g.shape().to_vec(), data)
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to<R: Real>(g: &Array<R>, shape: &[usize]) -> Array<R> {
    if g.shape() == shape {
        return g.clone();
    }
    let out = g.shape();
    let st = broadcast_strides(shape, out);
    let mut acc = vec![R::zero(); shape.iter().product()];
    let gd = g.data();
    for_each_broadcast(out, &st, &st, |i, o, _| acc[o] += gd[i]);
    Array::from_parts(shape.to_vec(), acc)
}

/// `reduce_to(g * other)` without materializing the product when shapes agree.
fn mul_reduce<R: Real>(g: &Array<R>, other: &Array<R>, shape: &[usize]) -> Array<R> {
    if g.shape() == shape && other.shape() == shape {
        return zip_map(g, other, |a, b| a * b);
    }
    let out = g.shape();
    let st = broadcast_strides(shape, out);
    let so = broadcast_strides(other.shape(), out);
    let mut acc = vec![R::zero(); shape.iter().product()];
    let (gd, od) = (g.data(), other.data());
    for_each_broadcast(out, &st, &so, |i, t, o| acc[t] += gd[i] * od[o]);
    Array::from_parts(shape.to_vec(), acc)
}
