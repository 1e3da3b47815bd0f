//! Resolution-mirrored convolutional discriminator.
//!
//! `fromrgb` (1×1) at full resolution, then for each generator level from the
//! finest down to 8×8: conv3x3 → lrelu → avgpool2. At 4×4: conv3x3 → lrelu →
//! flatten → `fc` → lrelu → `out`, giving one logit per sample.

use ttvr_core::{Bound, Checkpoint, Error, Graph, GraphOf, ParamStore, Real, Result, RngStream, Tensor, Var};

use crate::generator::GeneratorConfig;
use crate::nn::{conv, conv_lrelu, conv_weight, dense, dense_weight, LRELU_SLOPE};

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    cfg: GeneratorConfig,
    params: ParamStore,
}

impl Discriminator {
    /// Channel schedule mirrors the generator's at each resolution.
    pub fn init(cfg: GeneratorConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let gain = 2f32.sqrt();
        let top = cfg.n_levels() - 1;
        let mut p = ParamStore::new();
        p.insert("fromrgb.weight", conv_weight(cfg.channels(top), 3, 1, gain, &mut rng.fork("fromrgb")));
        p.insert("fromrgb.bias", Tensor::zeros(&[cfg.channels(top)]));
        for i in (1..=top).rev() {
            let (cin, c) = (cfg.channels(i), cfg.channels(i - 1));
            p.insert(format!("level{i}.conv.weight"), conv_weight(c, cin, 3, gain, &mut rng.fork(&format!("level{i}"))));
            p.insert(format!("level{i}.conv.bias"), Tensor::zeros(&[c]));
        }
        let c0 = cfg.channels(0);
        p.insert("final.conv.weight", conv_weight(c0, c0, 3, gain, &mut rng.fork("final")));
        p.insert("final.conv.bias", Tensor::zeros(&[c0]));
        p.insert("fc.weight", dense_weight(c0, c0 * 16, gain, &mut rng.fork("fc")));
        p.insert("fc.bias", Tensor::zeros(&[c0]));
        p.insert("out.weight", dense_weight(1, c0, 1.0, &mut rng.fork("out")));
        p.insert("out.bias", Tensor::zeros(&[1]));
        Ok(Self { cfg, params: p })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<R: Real>(&self, g: &mut GraphOf<R>, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        self.params.to_checkpoint(prefix)
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        self.params.load_from(ckpt, prefix)
    }

    /// Logits `(B, 1)` for a `(B, 3, R, R)` batch in [0, 1].
    pub fn forward<R: Real>(&self, g: &mut GraphOf<R>, p: &Bound, x: Var) -> Var {
        let top = self.cfg.n_levels() - 1;
        let x = g.scale(x, 2.0);
        let x = g.add_scalar(x, -1.0);
        let h = conv(g, p, "fromrgb", x);
        let mut h = g.leaky_relu(h, LRELU_SLOPE);
        for i in (1..=top).rev() {
            let y = conv_lrelu(g, p, &format!("level{i}.conv"), h);
            h = g.avg_pool(y, 2);
        }
        let h = conv_lrelu(g, p, "final.conv", h);
        let b = g.shape(h)[0];
        let flat = g.reshape(h, &[b, self.cfg.channels(0) * 16]);
        let h = dense(g, p, "fc", flat);
        let h = g.leaky_relu(h, LRELU_SLOPE);
        dense(g, p, "out", h)
    }

    pub fn check_batch(&self, t: &Tensor) -> Result<()> {
        let r = self.cfg.output_resolution;
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != r || s[3] != r {
            return Err(Error::Argument(format!(
                "discriminator expects (B, 3, {r}, {r}), got {s:?}"
            )));
        }
        Ok(())
    }

    /// Per-sample logits.
    pub fn score(&self, batch: &Tensor) -> Result<Vec<f32>> {
        self.check_batch(batch)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let d = self.forward(&mut g, &p, x);
        Ok(g.value(d).data().to_vec())
    }
}
