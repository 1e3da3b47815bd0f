//! Encoder/decoder that maps a degraded thermal image to a latent code and a
//! modulation pyramid for the frozen generator.
//!
//! Encoder: `F_0 = E_0(x)`, `F_i = E_i(avgpool2(F_{i-1}))` for `i = 1..n`,
//! `z = linear(flatten(F_n))`.
//!
//! Decoder (U-Net): `D̄_0 = F_n`, `D̄_j = lrelu(conv(deconv2x2(D̄_{j-1}))) + F_{n-j}`.
//! A zero-initialized 1×1 head maps each `D̄_j` to `2·C_j` generator channels.

use std::path::Path;

use ttvr_core::{
    load_checkpoint, save_checkpoint, Bound, Checkpoint, ColorSpace, Error, Graph, GraphOf, Image,
    ParamStore, Real, Result, RngStream, Tensor, Var,
};

use crate::generator::{GeneratorConfig, LatentCode, ModulationPyramid};
use crate::nn::{add_bias, conv, conv_lrelu, conv_weight, dense, dense_weight, images_to_batch, LRELU_SLOPE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProjectionConfig {
    pub input_resolution: usize,
    pub downsample_layers: usize,
    pub upsample_layers: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub kernel_size: usize,
    pub latent_dim: usize,
    /// Generator channel count `C_j` per level; heads emit `2·C_j`.
    pub modulation_channels: Vec<usize>,
}

impl ProjectionConfig {
    pub fn new(
        gen: &GeneratorConfig,
        downsample_layers: usize,
        base_channels: usize,
        max_channels: usize,
        kernel_size: usize,
    ) -> Self {
        Self {
            input_resolution: gen.output_resolution,
            downsample_layers,
            upsample_layers: downsample_layers,
            base_channels,
            max_channels,
            kernel_size,
            latent_dim: gen.latent_dim,
            modulation_channels: (0..gen.n_levels()).map(|i| gen.channels(i)).collect(),
        }
    }

    pub fn from_config(c: &crate::config::Config) -> Self {
        let mut p = Self::new(
            &GeneratorConfig::from_config(c),
            c.proj_downsample_layers,
            c.proj_base_channels,
            c.proj_max_channels,
            c.conv_kernel,
        );
        p.upsample_layers = c.proj_upsample_layers;
        p
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.downsample_layers;
        if self.input_resolution >> n != 4 || self.input_resolution != 4 << n {
            return Err(Error::Argument(format!(
                "{} downsample layers on {}px input do not reach a 4x4 bottleneck",
                n, self.input_resolution
            )));
        }
        if self.upsample_layers != n {
            return Err(Error::Argument("upsample and downsample layer counts differ".into()));
        }
        if self.modulation_channels.len() != n + 1 {
            return Err(Error::Argument(format!(
                "decoder has {} levels but the generator has {}",
                n + 1,
                self.modulation_channels.len()
            )));
        }
        if self.kernel_size % 2 == 0 || self.base_channels == 0 || self.max_channels < self.base_channels {
            return Err(Error::Argument("invalid projection kernel or channel sizes".into()));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        (self.base_channels << level.min(20)).min(self.max_channels)
    }

    pub fn resolution(&self, level: usize) -> usize {
        self.input_resolution >> level
    }
}

/// Encoder features `F_0..F_n`, each `(B, C_i, R/2^i, R/2^i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPyramid {
    pub features: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    cfg: ProjectionConfig,
    params: ParamStore,
}

impl Projection {
    pub fn init(cfg: ProjectionConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.downsample_layers;
        let k = cfg.kernel_size;
        let gain = 2f32.sqrt();
        let mut p = ParamStore::new();
        for i in 0..=n {
            let cin = if i == 0 { 1 } else { cfg.channels(i - 1) };
            let c = cfg.channels(i);
            let mut r = rng.fork(&format!("e{i}"));
            p.insert(format!("encoder.e{i}.weight"), conv_weight(c, cin, k, gain, &mut r));
            p.insert(format!("encoder.e{i}.bias"), Tensor::zeros(&[c]));
        }
        let flat = cfg.channels(n) * 16;
        p.insert("encoder.latent.weight", dense_weight(cfg.latent_dim, flat, 1.0, &mut rng.fork("latent")));
        p.insert("encoder.latent.bias", Tensor::zeros(&[cfg.latent_dim]));
        for j in 1..=n {
            let (cin, c) = (cfg.channels(n - j + 1), cfg.channels(n - j));
            let mut r = rng.fork(&format!("d{j}"));
            p.insert(
                format!("decoder.d{j}.deconv.weight"),
                Tensor::randn(&[cin, c, 2, 2], gain / (cin as f32).sqrt(), &mut r),
            );
            p.insert(format!("decoder.d{j}.deconv.bias"), Tensor::zeros(&[c]));
            p.insert(format!("decoder.d{j}.conv.weight"), conv_weight(c, c, k, gain, &mut r));
            p.insert(format!("decoder.d{j}.conv.bias"), Tensor::zeros(&[c]));
        }
        for j in 0..=n {
            let c = cfg.channels(n - j);
            let out = 2 * cfg.modulation_channels[j];
            p.insert(format!("decoder.head{j}.weight"), Tensor::zeros(&[out, c, 1, 1]));
            p.insert(format!("decoder.head{j}.bias"), Tensor::zeros(&[out]));
        }
        Ok(Self { cfg, params: p })
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<R: Real>(&self, g: &mut GraphOf<R>) -> Bound {
        self.params.bind(g, true)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        self.write_into(&mut c, "");
        c
    }

    /// Adds the weights (under `prefix`) and the configuration metadata to `c`.
    pub fn write_into(&self, c: &mut Checkpoint, prefix: &str) {
        for (k, v) in self.params.to_checkpoint(prefix).entries {
            c.insert(k, v);
        }
        let cfg = &self.cfg;
        c.set_meta("projection.resolution", cfg.input_resolution.to_string());
        c.set_meta("projection.downsample_layers", cfg.downsample_layers.to_string());
        c.set_meta("projection.base_channels", cfg.base_channels.to_string());
        c.set_meta("projection.max_channels", cfg.max_channels.to_string());
        c.set_meta("projection.kernel_size", cfg.kernel_size.to_string());
        c.set_meta("projection.latent_dim", cfg.latent_dim.to_string());
        let mods: Vec<String> = cfg.modulation_channels.iter().map(|c| c.to_string()).collect();
        c.set_meta("projection.modulation_channels", mods.join(","));
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::read_from(ckpt, "")
    }

    pub fn read_from(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            ckpt.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Integrity(format!("projection checkpoint lacks {k}")))
        };
        let n = get("projection.downsample_layers")?;
        let modulation_channels = ckpt
            .meta("projection.modulation_channels")
            .ok_or_else(|| Error::Integrity("projection checkpoint lacks modulation channels".into()))?
            .split(',')
            .map(|s| s.parse().map_err(|_| Error::Integrity(format!("bad channel count {s:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let cfg = ProjectionConfig {
            input_resolution: get("projection.resolution")?,
            downsample_layers: n,
            upsample_layers: n,
            base_channels: get("projection.base_channels")?,
            max_channels: get("projection.max_channels")?,
            kernel_size: get("projection.kernel_size")?,
            latent_dim: get("projection.latent_dim")?,
            modulation_channels,
        };
        let mut proj = Self::init(cfg, &mut ttvr_core::make_rng(0))
            .map_err(|e| Error::Integrity(format!("projection config in checkpoint: {e}")))?;
        proj.params.load_from(ckpt, prefix)?;
        Ok(proj)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    /// Encoder features and latent code for a `(B, 1, R, R)` batch.
    pub fn encode_graph<R: Real>(&self, g: &mut GraphOf<R>, p: &Bound, x: Var) -> (Vec<Var>, Var) {
        let n = self.cfg.downsample_layers;
        let mut feats = Vec::with_capacity(n + 1);
        let mut f = conv_lrelu(g, p, "encoder.e0", x);
        feats.push(f);
        for i in 1..=n {
            let pooled = g.avg_pool(f, 2);
            f = conv_lrelu(g, p, &format!("encoder.e{i}"), pooled);
            feats.push(f);
        }
        let b = g.shape(f)[0];
        let flat = g.reshape(f, &[b, self.cfg.channels(n) * 16]);
        let z = dense(g, p, "encoder.latent", flat);
        (feats, z)
    }

    /// Decoder levels coarsest first; returns the modulation heads' outputs.
    pub fn decode_graph<R: Real>(&self, g: &mut GraphOf<R>, p: &Bound, feats: &[Var]) -> Vec<Var> {
        let n = self.cfg.downsample_layers;
        let mut d = feats[n];
        let mut out = Vec::with_capacity(n + 1);
        out.push(conv(g, p, "decoder.head0", d));
        for j in 1..=n {
            let pre = format!("decoder.d{j}");
            let up = g.deconv2x2(d, p.var(&format!("{pre}.deconv.weight")));
            let up = add_bias(g, up, p.var(&format!("{pre}.deconv.bias")));
            let y = conv(g, p, &format!("{pre}.conv"), up);
            let y = g.leaky_relu(y, LRELU_SLOPE);
            d = g.add(y, feats[n - j]);
            out.push(conv(g, p, &format!("decoder.head{j}"), d));
        }
        out
    }

    pub fn forward_graph<R: Real>(&self, g: &mut GraphOf<R>, p: &Bound, x: Var) -> (Var, Vec<Var>) {
        let (feats, z) = self.encode_graph(g, p, x);
        let mods = self.decode_graph(g, p, &feats);
        (z, mods)
    }

    fn input_batch(&self, thermal: &[Image]) -> Result<Tensor> {
        if thermal.is_empty() {
            return Err(Error::Argument("empty thermal batch".into()));
        }
        let r = self.cfg.input_resolution;
        for img in thermal {
            if img.color_space() != ColorSpace::Grayscale || img.height() != r || img.width() != r {
                return Err(Error::Argument(format!(
                    "projection expects 1x{r}x{r} grayscale input, got {}x{}x{}",
                    img.channels(),
                    img.height(),
                    img.width()
                )));
            }
        }
        images_to_batch(thermal)
    }

    pub fn encode(&self, thermal: &[Image]) -> Result<(EncoderPyramid, LatentCode)> {
        let x = self.input_batch(thermal)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.constant(x);
        let (feats, z) = self.encode_graph(&mut g, &p, xv);
        let features = feats.iter().map(|&f| g.value(f).clone()).collect();
        Ok((EncoderPyramid { features }, LatentCode(g.value(z).clone())))
    }

    pub fn decode(&self, pyr: &EncoderPyramid) -> Result<ModulationPyramid> {
        let n = self.cfg.downsample_layers;
        if pyr.features.len() != n + 1 {
            return Err(Error::Argument(format!(
                "pyramid has {} levels, expected {}",
                pyr.features.len(),
                n + 1
            )));
        }
        let b = pyr.features[0].shape()[0];
        for (i, f) in pyr.features.iter().enumerate() {
            let r = self.cfg.resolution(i);
            let want = [b, self.cfg.channels(i), r, r];
            if f.shape() != want {
                return Err(Error::Argument(format!(
                    "encoder level {i} has shape {:?}, expected {want:?}",
                    f.shape()
                )));
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let feats: Vec<Var> = pyr.features.iter().map(|t| g.constant(t.clone())).collect();
        let mods = self.decode_graph(&mut g, &p, &feats);
        Ok(ModulationPyramid {
            levels: mods.iter().map(|&m| g.value(m).clone()).collect(),
        })
    }

    pub fn project(&self, thermal: &[Image]) -> Result<(LatentCode, ModulationPyramid)> {
        let (pyr, z) = self.encode(thermal)?;
        Ok((z, self.decode(&pyr)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ttvr_core::make_rng;

    fn cfg() -> ProjectionConfig {
        let gen = GeneratorConfig {
            output_resolution: 16,
            base_channels: 4,
            max_channels: 8,
            latent_dim: 8,
            mapping_layers: 1,
        };
        ProjectionConfig::new(&gen, 2, 4, 8, 3)
    }

    #[test]
    fn bottleneck_must_be_four() {
        let mut c = cfg();
        c.downsample_layers = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_shapes_halve() {
        let p = Projection::init(cfg(), &mut make_rng(1)).unwrap();
        let img = Image::filled(ColorSpace::Grayscale, 16, 16, 0.5);
        let (pyr, z) = p.encode(&[img]).unwrap();
        let res: Vec<usize> = pyr.features.iter().map(|f| f.shape()[2]).collect();
        assert_eq!(res, vec![16, 8, 4]);
        assert_eq!(z.0.shape(), &[1, 8]);
    }

    #[test]
    fn wrong_input_rejected() {
        let p = Projection::init(cfg(), &mut make_rng(1)).unwrap();
        let rgb = Image::filled(ColorSpace::Rgb, 16, 16, 0.5);
        assert!(matches!(p.encode(&[rgb]), Err(Error::Argument(_))));
        let small = Image::filled(ColorSpace::Grayscale, 8, 8, 0.5);
        assert!(p.encode(&[small]).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Projection::init(cfg(), &mut make_rng(1)).unwrap();
        let q = Projection::from_checkpoint(&p.to_checkpoint()).unwrap();
        assert_eq!(p, q);
    }
}
