//! Composite reconstruction objective, discriminator objective and the
//! distances built on the fixed backbones.
//!
//! Generator side:
//!
//! ```text
//! total = -λ_adv·mean softplus(D(Î)) + mean|I - Î| + λ_per·Σ_t mean|φ_t(I) - φ_t(Î)|
//!         + λ_id·mean|η(I) - η(Î)|
//! ```
//!
//! With [`AdvForm::NonSaturating`] the adversarial part becomes
//! `+λ_adv·mean softplus(-D(Î))`.

use std::collections::BTreeMap;

use ttvr_core::{Bound, Error, Graph, GraphOf, Image, Real, Result, Tensor, Var};

use crate::nn::images_to_batch;

pub mod backbone;
pub mod discriminator;

pub use backbone::{rgb_batch, BackboneRole, EmbeddingBackbone};
pub use discriminator::Discriminator;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_adv: f32,
    pub lambda_per: f32,
    pub lambda_id: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_adv: 1.0,
            lambda_per: 10.0,
            lambda_id: 10.0,
        }
    }
}

impl LossWeights {
    pub fn from_config(c: &crate::config::Config) -> Self {
        Self {
            lambda_adv: c.lambda_adv,
            lambda_per: c.lambda_per,
            lambda_id: c.lambda_id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvForm {
    /// `-softplus(D(Î))`, as the objective is written.
    Literal,
    /// `softplus(-D(Î))`.
    NonSaturating,
}

impl AdvForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(AdvForm::Literal),
            "nonsaturating" => Ok(AdvForm::NonSaturating),
            other => Err(Error::Argument(format!("unknown adv_form {other:?}"))),
        }
    }

    fn sign(self) -> f32 {
        match self {
            AdvForm::Literal => -1.0,
            AdvForm::NonSaturating => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f32,
    /// Raw adversarial mean (before sign and weight).
    pub adv: f32,
    pub pixel: f32,
    pub perceptual: f32,
    pub identity: f32,
}

impl LossReport {
    /// Recombines the components in the same order and precision as the graph.
    pub fn combine(w: &LossWeights, form: AdvForm, adv: f32, pixel: f32, perceptual: f32, identity: f32) -> f32 {
        let a = adv * (form.sign() * w.lambda_adv);
        let t = a + pixel;
        let t = t + perceptual * w.lambda_per;
        t + identity * w.lambda_id
    }

    pub fn recombined(&self, w: &LossWeights, form: AdvForm) -> f32 {
        Self::combine(w, form, self.adv, self.pixel, self.perceptual, self.identity)
    }
}

/// Graph handles for the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub adv: Var,
    pub pixel: Var,
    pub perceptual: Var,
    pub identity: Var,
}

impl LossVars {
    pub fn report<R: Real>(&self, g: &GraphOf<R>) -> LossReport {
        LossReport {
            total: g.value(self.total).item().as_f64() as f32,
            adv: g.value(self.adv).item().as_f64() as f32,
            pixel: g.value(self.pixel).item().as_f64() as f32,
            perceptual: g.value(self.perceptual).item().as_f64() as f32,
            identity: g.value(self.identity).item().as_f64() as f32,
        }
    }
}

pub fn l1_mean<R: Real>(g: &mut GraphOf<R>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// The fixed networks the generator objective is evaluated with.
pub struct Critics<'a> {
    pub discriminator: &'a Discriminator,
    pub phi: &'a EmbeddingBackbone,
    pub eta: &'a EmbeddingBackbone,
}

impl Critics<'_> {
    pub fn ensure_loaded(&self) -> Result<()> {
        self.phi.ensure_loaded()?;
        self.eta.ensure_loaded()
    }
}

/// Builds the generator objective for `fake` against `real` (both `(B, 3, R, R)`).
/// `dp` is the discriminator's binding in `g` (normally constants).
pub fn generator_loss_graph<R: Real>(
    g: &mut GraphOf<R>,
    real: Var,
    fake: Var,
    critics: &Critics,
    dp: &Bound,
    w: &LossWeights,
    form: AdvForm,
) -> LossVars {
    let logits = critics.discriminator.forward(g, dp, fake);
    let adv_in = match form {
        AdvForm::Literal => logits,
        AdvForm::NonSaturating => g.neg(logits),
    };
    let sp = g.softplus(adv_in);
    let adv = g.mean(sp);
    let pixel = l1_mean(g, real, fake);

    let fr = critics.phi.features_graph(g, real);
    let ff = critics.phi.features_graph(g, fake);
    let mut perceptual: Option<Var> = None;
    for (a, b) in fr.into_iter().zip(ff) {
        let d = l1_mean(g, a, b);
        perceptual = Some(match perceptual {
            None => d,
            Some(acc) => g.add(acc, d),
        });
    }
    let perceptual = perceptual.expect("perceptual backbone has taps");

    let er = critics.eta.embed_graph(g, real);
    let ef = critics.eta.embed_graph(g, fake);
    let identity = l1_mean(g, er, ef);

    let a = g.scale(adv, form.sign() * w.lambda_adv);
    let t = g.add(a, pixel);
    let p = g.scale(perceptual, w.lambda_per);
    let t = g.add(t, p);
    let i = g.scale(identity, w.lambda_id);
    let total = g.add(t, i);
    LossVars {
        total,
        adv,
        pixel,
        perceptual,
        identity,
    }
}

fn rgb_stack(images: &[Image]) -> Result<Tensor> {
    let rgb: Vec<Image> = images.iter().map(Image::to_rgb).collect();
    images_to_batch(&rgb)
}

/// Evaluates the generator objective on concrete image batches.
pub fn generator_loss(
    real: &[Image],
    fake: &[Image],
    critics: &Critics,
    w: &LossWeights,
    form: AdvForm,
) -> Result<LossReport> {
    critics.ensure_loaded()?;
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::Argument(format!(
            "batches differ in size: {} real vs {} fake",
            real.len(),
            fake.len()
        )));
    }
    let (rt, ft) = (rgb_stack(real)?, rgb_stack(fake)?);
    if rt.shape() != ft.shape() {
        return Err(Error::Argument(format!("shape mismatch {:?} vs {:?}", rt.shape(), ft.shape())));
    }
    critics.discriminator.check_batch(&ft)?;
    let mut g = Graph::new();
    let dp = critics.discriminator.bind(&mut g, false);
    let r = g.constant(rt);
    let f = g.constant(ft);
    let vars = generator_loss_graph(&mut g, r, f, critics, &dp, w, form);
    Ok(vars.report(&g))
}

/// Sum over tapped layers of the mean absolute feature difference.
pub fn perceptual_distance(phi: &EmbeddingBackbone, a: &Image, b: &Image) -> Result<f32> {
    phi.ensure_loaded()?;
    EmbeddingBackbone::check_pair(a, b)?;
    let fa = phi.features(&rgb_batch(a)?)?;
    let fb = phi.features(&rgb_batch(b)?)?;
    let total: f64 = fa
        .iter()
        .zip(&fb)
        .map(|(x, y)| {
            let s: f64 = x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs() as f64).sum();
            s / x.numel() as f64
        })
        .sum();
    Ok(total as f32)
}

/// Mean absolute difference of identity embeddings.
pub fn identity_distance(eta: &EmbeddingBackbone, a: &Image, b: &Image) -> Result<f32> {
    eta.ensure_loaded()?;
    EmbeddingBackbone::check_pair(a, b)?;
    let ea = eta.embed_image(a)?;
    let eb = eta.embed_image(b)?;
    let s: f64 = ea.iter().zip(&eb).map(|(p, q)| (p - q).abs() as f64).sum();
    Ok((s / ea.len() as f64) as f32)
}

/// Outcome of one discriminator objective evaluation.
#[derive(Clone, Debug)]
pub struct DiscriminatorStep {
    /// `mean softplus(-D(real)) + mean softplus(D(fake))`.
    pub logistic: f32,
    /// `(γ/2)·mean_b ‖∇_x D(real_b)‖²`, zero when not evaluated.
    pub r1: f32,
    pub grads: BTreeMap<String, Tensor>,
}

impl DiscriminatorStep {
    pub fn total(&self) -> f32 {
        self.logistic + self.r1
    }
}

fn check_pair_batches(d: &Discriminator, real: &Tensor, fake: &Tensor) -> Result<()> {
    if real.shape() != fake.shape() {
        return Err(Error::Argument(format!(
            "real {:?} and fake {:?} batches differ",
            real.shape(),
            fake.shape()
        )));
    }
    d.check_batch(real)
}

/// Input gradient of `Σ_b D(x_b)`, which is each sample's own gradient.
pub fn input_gradient(d: &Discriminator, x: &Tensor) -> Result<Tensor> {
    d.check_batch(x)?;
    let mut g = Graph::new();
    let p = d.bind(&mut g, false);
    let xv = g.leaf(x.clone());
    let out = d.forward(&mut g, &p, xv);
    let s = g.sum(out);
    let mut grads = g.backward(s);
    Ok(grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// `(γ/2)·mean_b ‖∇_x D(real_b)‖²`.
pub fn r1_penalty(d: &Discriminator, real: &Tensor, gamma: f32) -> Result<f32> {
    let gx = input_gradient(d, real)?;
    let sq: f64 = gx.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
    Ok((gamma as f64 * 0.5 * sq / real.shape()[0] as f64) as f32)
}

/// Objective value only.
pub fn discriminator_loss(d: &Discriminator, real: &Tensor, fake: &Tensor, gamma: f32) -> Result<f32> {
    check_pair_batches(d, real, fake)?;
    let mut g = Graph::new();
    let p = d.bind(&mut g, false);
    let logistic = logistic_graph(&mut g, d, &p, real, fake);
    let mut total = g.value(logistic).item();
    if gamma > 0.0 {
        total += r1_penalty(d, real, gamma)?;
    }
    Ok(total)
}

fn logistic_graph<R: Real>(g: &mut GraphOf<R>, d: &Discriminator, p: &Bound, real: &Tensor, fake: &Tensor) -> Var {
    let r = g.constant(real.clone());
    let f = g.constant(fake.clone());
    let dr = d.forward(g, p, r);
    let df = d.forward(g, p, f);
    let nr = g.neg(dr);
    let sr = g.softplus(nr);
    let sf = g.softplus(df);
    let mr = g.mean(sr);
    let mf = g.mean(sf);
    g.add(mr, mf)
}

fn param_grads_at(d: &Discriminator, x: &Tensor) -> BTreeMap<String, Tensor> {
    let mut g = Graph::new();
    let p = d.bind(&mut g, true);
    let xv = g.constant(x.clone());
    let out = d.forward(&mut g, &p, xv);
    let s = g.sum(out);
    let mut grads = g.backward(s);
    p.collect(&g, &mut grads)
}

/// Parameter gradient of the R1 penalty, `(γ/B)·H_θx·g` with `g = ∇_x ΣD`.
///
/// The mixed Hessian-vector product is a central difference of parameter
/// gradients along `g`: `[∇_θ ΣD(x + εg) - ∇_θ ΣD(x - εg)] / 2ε`.
pub fn r1_param_grads(d: &Discriminator, real: &Tensor, gamma: f32) -> Result<(f32, BTreeMap<String, Tensor>)> {
    let gx = input_gradient(d, real)?;
    let b = real.shape()[0] as f64;
    let sq: f64 = gx.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
    let value = (gamma as f64 * 0.5 * sq / b) as f32;
    let rms = (sq / gx.numel() as f64).sqrt();
    if rms == 0.0 || gamma == 0.0 {
        let zeros = d.params().iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        return Ok((value, zeros));
    }
    let eps = (1e-3 / rms) as f32;
    let shifted = |sign: f32| {
        let data = real.data().iter().zip(gx.data()).map(|(x, g)| x + sign * eps * g).collect();
        Tensor::new(real.shape(), data).expect("same shape")
    };
    let plus = param_grads_at(d, &shifted(1.0));
    let minus = param_grads_at(d, &shifted(-1.0));
    let scale = gamma / (b as f32 * 2.0 * eps);
    let grads = plus
        .into_iter()
        .zip(minus)
        .map(|((k, p), (_, m))| {
            let data = p.data().iter().zip(m.data()).map(|(a, b)| (a - b) * scale).collect();
            (k, Tensor::new(p.shape(), data).expect("same shape"))
        })
        .collect();
    Ok((value, grads))
}

/// Logistic loss and its parameter gradients, plus `r1_weight` times the R1
/// penalty gradient when `r1_weight > 0`.
pub fn discriminator_step(
    d: &Discriminator,
    real: &Tensor,
    fake: &Tensor,
    gamma: f32,
    r1_weight: f32,
) -> Result<DiscriminatorStep> {
    check_pair_batches(d, real, fake)?;
    let mut g = Graph::new();
    let p = d.bind(&mut g, true);
    let loss = logistic_graph(&mut g, d, &p, real, fake);
    let mut grads = g.backward(loss);
    let mut out = p.collect(&g, &mut grads);
    let mut r1 = 0.0;
    if r1_weight > 0.0 && gamma > 0.0 {
        let (value, rg) = r1_param_grads(d, real, gamma)?;
        r1 = value;
        for (k, t) in rg {
            let acc = out.get_mut(&k).expect("same parameter set");
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += r1_weight * v;
            }
        }
    }
    Ok(DiscriminatorStep {
        logistic: g.value(loss).item(),
        r1,
        grads: out,
    })
}
