//! Fixed feature networks used by the perceptual and identity terms and by
//! the LPIPS/Deg metrics.
//!
//! A backbone is a stack of stages; stage `i` is `[avgpool2 if i > 0] →
//! conv3x3 → lrelu`. The perceptual role reports the tapped stage outputs; the
//! identity role average-pools the last stage to 4×4 and projects it to an
//! embedding. Weights are either seeded at random (the shipped test
//! backbones) or loaded from a checkpoint with the same name schema:
//!
//! ```text
//! stage{i}.weight / .bias        (C_i, C_{i-1}, 3, 3) / (C_i,)
//! embed.weight / .bias           (D, C_last·16) / (D,)     identity only
//! ```

use std::path::Path;

use ttvr_core::{
    load_checkpoint, save_checkpoint, Checkpoint, ColorSpace, Error, Graph, GraphOf, Image, ParamStore,
    Real, Result, RngStream, Tensor, Var,
};

use crate::nn::{conv_lrelu, conv_weight, dense, dense_weight, images_to_batch};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackboneRole {
    Perceptual,
    Identity,
}

impl BackboneRole {
    fn name(self) -> &'static str {
        match self {
            BackboneRole::Perceptual => "perceptual",
            BackboneRole::Identity => "identity",
        }
    }
}

pub const DEFAULT_STAGES: [usize; 3] = [8, 16, 32];

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBackbone {
    role: BackboneRole,
    channels: Vec<usize>,
    taps: Vec<usize>,
    embed_dim: usize,
    params: ParamStore,
}

impl EmbeddingBackbone {
    /// Random-weight perceptual network tapping every stage.
    pub fn seeded_perceptual(seed: u64) -> Self {
        let rng = ttvr_core::make_rng(seed).fork("phi");
        let channels = DEFAULT_STAGES.to_vec();
        let taps = (0..channels.len()).collect();
        Self::seeded(BackboneRole::Perceptual, channels, taps, 0, rng)
    }

    /// Random-weight identity network with a `embed_dim`-wide embedding.
    pub fn seeded_identity(seed: u64, embed_dim: usize) -> Self {
        let rng = ttvr_core::make_rng(seed).fork("eta");
        Self::seeded(BackboneRole::Identity, DEFAULT_STAGES.to_vec(), vec![], embed_dim, rng)
    }

    fn seeded(role: BackboneRole, channels: Vec<usize>, taps: Vec<usize>, embed_dim: usize, rng: RngStream) -> Self {
        let mut params = ParamStore::new();
        let mut cin = 3;
        for (i, &c) in channels.iter().enumerate() {
            let mut r = rng.fork(&format!("stage{i}"));
            params.insert(format!("stage{i}.weight"), conv_weight(c, cin, 3, 2f32.sqrt(), &mut r));
            params.insert(format!("stage{i}.bias"), Tensor::zeros(&[c]));
            cin = c;
        }
        if role == BackboneRole::Identity {
            let mut r = rng.fork("embed");
            params.insert("embed.weight", dense_weight(embed_dim, cin * 16, 1.0, &mut r));
            params.insert("embed.bias", Tensor::zeros(&[embed_dim]));
        }
        Self {
            role,
            channels,
            taps,
            embed_dim,
            params,
        }
    }

    /// A backbone with no weights; every evaluation fails with a state error.
    pub fn unloaded(role: BackboneRole) -> Self {
        Self {
            role,
            channels: vec![],
            taps: vec![],
            embed_dim: 0,
            params: ParamStore::new(),
        }
    }

    /// `path` when given and non-empty, otherwise the seeded backbone.
    pub fn resolve(role: BackboneRole, path: &str, seed: u64, embed_dim: usize) -> Result<Self> {
        if !path.is_empty() {
            let b = Self::load(path)?;
            if b.role != role {
                return Err(Error::Integrity(format!(
                    "{path} holds a {} backbone, expected {}",
                    b.role.name(),
                    role.name()
                )));
            }
            return Ok(b);
        }
        Ok(match role {
            BackboneRole::Perceptual => Self::seeded_perceptual(seed),
            BackboneRole::Identity => Self::seeded_identity(seed, embed_dim),
        })
    }

    pub fn role(&self) -> BackboneRole {
        self.role
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn is_loaded(&self) -> bool {
        !self.params.is_empty()
    }

    pub fn ensure_loaded(&self) -> Result<()> {
        if self.is_loaded() {
            Ok(())
        } else {
            Err(Error::State(format!("{} backbone is not loaded", self.role.name())))
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.params.to_checkpoint("");
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        c.set_meta("backbone.role", self.role.name());
        c.set_meta("backbone.channels", list(&self.channels));
        c.set_meta("backbone.taps", list(&self.taps));
        c.set_meta("backbone.embed_dim", self.embed_dim.to_string());
        c
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = |k: &str| {
            ckpt.meta(k)
                .ok_or_else(|| Error::Integrity(format!("backbone checkpoint lacks {k}")))
        };
        let list = |s: &str| -> Result<Vec<usize>> {
            s.split(',')
                .filter(|p| !p.is_empty())
                .map(|p| p.parse().map_err(|_| Error::Integrity(format!("bad list entry {p:?}"))))
                .collect()
        };
        let role = match meta("backbone.role")? {
            "perceptual" => BackboneRole::Perceptual,
            "identity" => BackboneRole::Identity,
            other => return Err(Error::Integrity(format!("unknown backbone role {other:?}"))),
        };
        let channels = list(meta("backbone.channels")?)?;
        let taps = list(meta("backbone.taps")?)?;
        let embed_dim: usize = meta("backbone.embed_dim")?
            .parse()
            .map_err(|_| Error::Integrity("bad backbone.embed_dim".into()))?;
        if channels.is_empty() || taps.iter().any(|&t| t >= channels.len()) {
            return Err(Error::Integrity("backbone stages/taps are inconsistent".into()));
        }
        if role == BackboneRole::Perceptual && taps.is_empty() {
            return Err(Error::Integrity("perceptual backbone has no taps".into()));
        }
        let mut b = Self::seeded(role, channels, taps, embed_dim, ttvr_core::make_rng(0));
        b.params.load_from(ckpt, "")?;
        Ok(b)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    /// Smallest side length the network accepts is a multiple of this.
    pub fn size_multiple(&self) -> usize {
        let pools = 1 << (self.channels.len().saturating_sub(1));
        match self.role {
            BackboneRole::Perceptual => pools,
            BackboneRole::Identity => pools * 4,
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        self.ensure_loaded()?;
        let m = self.size_multiple();
        if shape.len() != 4 || !matches!(shape[1], 1 | 3) || shape[2] % m != 0 || shape[3] % m != 0 {
            return Err(Error::Argument(format!(
                "{} backbone needs (B, 1|3, H, W) with H, W multiples of {m}, got {shape:?}",
                self.role.name()
            )));
        }
        Ok(())
    }

    fn stages<R: Real>(&self, g: &mut GraphOf<R>, x: Var) -> Vec<Var> {
        let p = self.params.bind(g, false);
        let shape = g.shape(x).to_vec();
        let mut h = if shape[1] == 1 {
            let ones = g.constant(Tensor::ones(&[1, 3, 1, 1]));
            g.mul(x, ones)
        } else {
            x
        };
        h = g.scale(h, 2.0);
        h = g.add_scalar(h, -1.0);
        let mut outs = Vec::with_capacity(self.channels.len());
        for i in 0..self.channels.len() {
            if i > 0 {
                h = g.avg_pool(h, 2);
            }
            h = conv_lrelu(g, &p, &format!("stage{i}"), h);
            outs.push(h);
        }
        if self.role == BackboneRole::Identity {
            let [b, c, hh] = [shape[0], self.channels[self.channels.len() - 1], g.shape(h)[2]];
            let pooled = g.avg_pool(h, hh / 4);
            let flat = g.reshape(pooled, &[b, c * 16]);
            outs.push(dense(g, &p, "embed", flat));
        }
        outs
    }

    /// Tapped feature maps of a `(B, C, H, W)` batch inside `g`.
    pub fn features_graph<R: Real>(&self, g: &mut GraphOf<R>, x: Var) -> Vec<Var> {
        let all = self.stages(g, x);
        self.taps.iter().map(|&t| all[t]).collect()
    }

    /// `(B, D)` embeddings inside `g`.
    pub fn embed_graph<R: Real>(&self, g: &mut GraphOf<R>, x: Var) -> Var {
        *self.stages(g, x).last().expect("identity backbone has an embedding")
    }

    pub fn features(&self, batch: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(batch.shape())?;
        if self.role != BackboneRole::Perceptual {
            return Err(Error::State("identity backbone has no feature taps".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let f = self.features_graph(&mut g, x);
        Ok(f.into_iter().map(|v| g.value(v).clone()).collect())
    }

    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch.shape())?;
        if self.role != BackboneRole::Identity {
            return Err(Error::State("perceptual backbone has no embedding".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let e = self.embed_graph(&mut g, x);
        Ok(g.value(e).clone())
    }

    /// Embedding of a single image as a plain vector.
    pub fn embed_image(&self, img: &Image) -> Result<Vec<f32>> {
        let b = images_to_batch(std::slice::from_ref(img))?;
        Ok(self.embed(&b)?.into_data())
    }

    pub fn check_pair(a: &Image, b: &Image) -> Result<()> {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::Argument(format!(
                "image sizes differ: {}x{} vs {}x{}",
                a.height(),
                a.width(),
                b.height(),
                b.width()
            )));
        }
        Ok(())
    }
}

/// Single image as an RGB `(1, 3, H, W)` batch.
pub fn rgb_batch(img: &Image) -> Result<Tensor> {
    let rgb = match img.color_space() {
        ColorSpace::Rgb => img.clone(),
        ColorSpace::Grayscale => img.to_rgb(),
    };
    images_to_batch(std::slice::from_ref(&rgb))
}
