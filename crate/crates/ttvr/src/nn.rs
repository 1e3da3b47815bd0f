//! Layer helpers shared by the networks.

use ttvr_core::{Bound, ColorSpace, Error, GraphOf, Image, Real, Result, RngStream, Tensor, Var};

pub const LRELU_SLOPE: f32 = 0.2;

/// He-style normal init for a `(o, i, k, k)` convolution.
pub fn conv_weight(o: usize, i: usize, k: usize, gain: f32, rng: &mut RngStream) -> Tensor {
    let std = gain / ((i * k * k) as f32).sqrt();
    Tensor::randn(&[o, i, k, k], std, rng)
}

pub fn dense_weight(o: usize, i: usize, gain: f32, rng: &mut RngStream) -> Tensor {
    Tensor::randn(&[o, i], gain / (i as f32).sqrt(), rng)
}

/// Adds a per-channel bias of shape `(C,)` to a `(B, C, …)` tensor.
pub fn add_bias<R: Real>(g: &mut GraphOf<R>, x: Var, b: Var) -> Var {
    let mut shape = vec![1; g.shape(x).len()];
    shape[1] = g.shape(b)[0];
    let b = g.reshape(b, &shape);
    g.add(x, b)
}

/// `name.weight` convolution plus `name.bias`.
pub fn conv<R: Real>(g: &mut GraphOf<R>, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.var(&format!("{name}.weight"));
    let pad = g.shape(w)[2] / 2;
    let y = g.conv2d(x, w, pad);
    add_bias(g, y, p.var(&format!("{name}.bias")))
}

pub fn conv_lrelu<R: Real>(g: &mut GraphOf<R>, p: &Bound, name: &str, x: Var) -> Var {
    let y = conv(g, p, name, x);
    g.leaky_relu(y, LRELU_SLOPE)
}

/// `name.weight` linear map plus `name.bias`.
pub fn dense<R: Real>(g: &mut GraphOf<R>, p: &Bound, name: &str, x: Var) -> Var {
    let y = g.linear(x, p.var(&format!("{name}.weight")));
    add_bias(g, y, p.var(&format!("{name}.bias")))
}

/// Multiplies `(B, C, H, W)` by per-sample channel factors `(B, C)`.
pub fn scale_channels<R: Real>(g: &mut GraphOf<R>, x: Var, s: Var) -> Var {
    let [b, c] = [g.shape(s)[0], g.shape(s)[1]];
    let s = g.reshape(s, &[b, c, 1, 1]);
    g.mul(x, s)
}

/// Stacks equally sized images into a `(B, C, H, W)` batch.
pub fn images_to_batch(images: &[Image]) -> Result<Tensor> {
    let tensors: Vec<Tensor> = images.iter().map(|i| i.tensor().clone()).collect();
    Tensor::stack(&tensors)
}

pub fn batch_to_images(t: &Tensor, color: ColorSpace) -> Result<Vec<Image>> {
    if t.shape().len() != 4 {
        return Err(Error::Argument(format!("expected (B, C, H, W), got {:?}", t.shape())));
    }
    (0..t.shape()[0])
        .map(|b| Image::new(t.index_outer(b), color))
        .collect()
}
