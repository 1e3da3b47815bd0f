//! Style-based synthesis network and its feature-modulated generation path.
//!
//! Levels run at resolutions 4, 8, …, `output_resolution`. Level 0 starts
//! from a learned constant; every later level upsamples the previous features
//! by 2. Each level applies a style-modulated, demodulated 3×3 convolution,
//! injects per-pixel noise, adds a bias and applies a leaky ReLU. A skip
//! to-RGB branch at every level accumulates the output image.
//!
//! Modulated generation replaces each level output `L_i` by
//! `(L_i + mean_i) * (1 + raw_std_i)` where `(mean_i, raw_std_i)` are the two
//! channel halves of the decoder feature for that level.
//!
//! Checkpoint names:
//!
//! ```text
//! mapping.fc{j}.weight / .bias
//! synthesis.const
//! synthesis.level{i}.affine.weight / .bias
//! synthesis.level{i}.conv.weight / .bias
//! synthesis.level{i}.noise_strength
//! synthesis.level{i}.torgb.affine.weight / .bias
//! synthesis.level{i}.torgb.weight / .bias
//! ```

use std::path::Path;

use ttvr_core::{
    load_checkpoint, save_checkpoint, Bound, Checkpoint, ColorSpace, Error, Graph, GraphOf, Image,
    ParamStore, Real, Result, RngStream, Tensor, Var,
};

use crate::nn::{add_bias, batch_to_images, dense, dense_weight, scale_channels, LRELU_SLOPE};

const DEMOD_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub output_resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub latent_dim: usize,
    pub mapping_layers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            output_resolution: 64,
            base_channels: 16,
            max_channels: 64,
            latent_dim: 512,
            mapping_layers: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn from_config(c: &crate::config::Config) -> Self {
        Self {
            output_resolution: c.resolution,
            base_channels: c.gen_base_channels,
            max_channels: c.gen_max_channels,
            latent_dim: c.latent_dim,
            mapping_layers: c.mapping_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.output_resolution.is_power_of_two() || self.output_resolution < 8 {
            return Err(Error::Argument(format!(
                "generator resolution {} must be a power of two >= 8",
                self.output_resolution
            )));
        }
        if self.base_channels == 0 || self.max_channels < self.base_channels || self.latent_dim == 0 {
            return Err(Error::Argument("generator channel/latent sizes are invalid".into()));
        }
        Ok(())
    }

    /// `log2(resolution) - 1`: one level per resolution 4, 8, …, R.
    pub fn n_levels(&self) -> usize {
        self.output_resolution.trailing_zeros() as usize - 1
    }

    pub fn level_resolution(&self, level: usize) -> usize {
        4 << level
    }

    /// Channel count doubles per level toward the coarse end, capped at `max_channels`.
    pub fn channels(&self, level: usize) -> usize {
        let shift = self.n_levels() - 1 - level;
        (self.base_channels << shift.min(20)).min(self.max_channels)
    }

    fn input_channels(&self, level: usize) -> usize {
        self.channels(level.saturating_sub(1))
    }

    fn write_meta(&self, c: &mut Checkpoint) {
        c.set_meta("generator.resolution", self.output_resolution.to_string());
        c.set_meta("generator.base_channels", self.base_channels.to_string());
        c.set_meta("generator.max_channels", self.max_channels.to_string());
        c.set_meta("generator.latent_dim", self.latent_dim.to_string());
        c.set_meta("generator.mapping_layers", self.mapping_layers.to_string());
    }

    fn read_meta(c: &Checkpoint) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            c.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Integrity(format!("generator checkpoint lacks {k}")))
        };
        Ok(Self {
            output_resolution: get("generator.resolution")?,
            base_channels: get("generator.base_channels")?,
            max_channels: get("generator.max_channels")?,
            latent_dim: get("generator.latent_dim")?,
            mapping_layers: get("generator.mapping_layers")?,
        })
    }
}

/// Batch of latent codes, shape `(B, latent_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(pub Tensor);

impl LatentCode {
    pub fn random(batch: usize, dim: usize, rng: &mut RngStream) -> Self {
        Self(Tensor::randn(&[batch, dim], 1.0, rng))
    }

    pub fn batch(&self) -> usize {
        self.0.shape()[0]
    }
}

/// Per-level decoder features `(B, 2·C_i, 4·2^i, 4·2^i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModulationPyramid {
    pub levels: Vec<Tensor>,
}

impl ModulationPyramid {
    /// Identity modulation: zero mean and zero raw std at every level.
    pub fn zeros(cfg: &GeneratorConfig, batch: usize) -> Self {
        let levels = (0..cfg.n_levels())
            .map(|i| {
                let r = cfg.level_resolution(i);
                Tensor::zeros(&[batch, 2 * cfg.channels(i), r, r])
            })
            .collect();
        Self { levels }
    }

    pub fn check(&self, cfg: &GeneratorConfig, batch: usize) -> Result<()> {
        if self.levels.len() != cfg.n_levels() {
            return Err(Error::Argument(format!(
                "modulation pyramid has {} levels, generator has {}",
                self.levels.len(),
                cfg.n_levels()
            )));
        }
        for (i, t) in self.levels.iter().enumerate() {
            let r = cfg.level_resolution(i);
            let want = [batch, 2 * cfg.channels(i), r, r];
            if t.shape() != want {
                return Err(Error::Argument(format!(
                    "modulation level {i} has shape {:?}, expected {want:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Source of the per-level noise inputs. Noise for sample `b` at level `i`
/// comes from `fork("sample{b}/level{i}")`, independent of batch composition.
#[derive(Clone, Debug)]
pub struct NoiseSeeds {
    stream: RngStream,
}

impl NoiseSeeds {
    pub fn new(stream: RngStream) -> Self {
        Self { stream }
    }

    pub fn level_noise(&self, level: usize, batch: usize, res: usize) -> Tensor {
        let mut data = Vec::with_capacity(batch * res * res);
        for b in 0..batch {
            let mut s = self.stream.fork(&format!("sample{b}/level{level}"));
            data.extend((0..res * res).map(|_| s.normal() as f32));
        }
        Tensor::new(&[batch, 1, res, res], data).expect("sized above")
    }

    pub fn all_levels(&self, cfg: &GeneratorConfig, batch: usize) -> Vec<Tensor> {
        (0..cfg.n_levels())
            .map(|i| self.level_noise(i, batch, cfg.level_resolution(i)))
            .collect()
    }
}

/// Synthesis network weights. A frozen generator is bound into graphs as
/// constants, so no optimizer can ever see its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    cfg: GeneratorConfig,
    params: ParamStore,
    frozen: bool,
}

/// Graph handles for one generator forward pass.
pub struct SynthesisOutput {
    /// `0.5 + 0.5 * rgb` before clamping.
    pub pre_clamp: Var,
    pub image: Var,
    /// Block outputs `F̂_i` after modulation.
    pub features: Vec<Var>,
}

impl Generator {
    pub fn init(cfg: GeneratorConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamStore::new();
        let d = cfg.latent_dim;
        for j in 0..cfg.mapping_layers {
            p.insert(format!("mapping.fc{j}.weight"), dense_weight(d, d, 2f32.sqrt(), &mut rng.fork(&format!("fc{j}"))));
            p.insert(format!("mapping.fc{j}.bias"), Tensor::zeros(&[d]));
        }
        let c0 = cfg.channels(0);
        p.insert("synthesis.const", Tensor::randn(&[1, c0, 4, 4], 1.0, &mut rng.fork("const")));
        for i in 0..cfg.n_levels() {
            let (cin, c) = (cfg.input_channels(i), cfg.channels(i));
            let mut r = rng.fork(&format!("level{i}"));
            let pre = format!("synthesis.level{i}");
            p.insert(format!("{pre}.affine.weight"), dense_weight(cin, d, 1.0, &mut r));
            p.insert(format!("{pre}.affine.bias"), Tensor::ones(&[cin]));
            p.insert(format!("{pre}.conv.weight"), Tensor::randn(&[c, cin, 3, 3], 1.0, &mut r));
            p.insert(format!("{pre}.conv.bias"), Tensor::zeros(&[c]));
            p.insert(format!("{pre}.noise_strength"), Tensor::full(&[1], 0.1));
            p.insert(format!("{pre}.torgb.affine.weight"), dense_weight(c, d, 1.0, &mut r));
            p.insert(format!("{pre}.torgb.affine.bias"), Tensor::ones(&[c]));
            p.insert(format!("{pre}.torgb.weight"), Tensor::randn(&[3, c, 1, 1], 1.0 / (c as f32).sqrt(), &mut r));
            p.insert(format!("{pre}.torgb.bias"), Tensor::zeros(&[3]));
        }
        Ok(Self {
            cfg,
            params: p,
            frozen: false,
        })
    }

    /// A generator with no weights; every forward pass fails with a state error.
    pub fn unloaded(cfg: GeneratorConfig) -> Self {
        Self {
            cfg,
            params: ParamStore::new(),
            frozen: false,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable weights for pretraining; refused once frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore> {
        if self.frozen {
            return Err(Error::State("generator is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn ensure_loaded(&self) -> Result<()> {
        if self.params.is_empty() {
            Err(Error::State("generator weights are not loaded".into()))
        } else {
            Ok(())
        }
    }

    /// Binds weights into `g`: constants when frozen, trainable leaves otherwise.
    pub fn bind<R: Real>(&self, g: &mut GraphOf<R>) -> Bound {
        self.params.bind(g, !self.frozen)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = self.params.to_checkpoint("");
        self.cfg.write_meta(&mut c);
        c
    }

    /// Rebuilds a generator from a checkpoint, checking every entry against the
    /// shapes implied by the recorded configuration.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = GeneratorConfig::read_meta(ckpt)?;
        cfg.validate()
            .map_err(|e| Error::Integrity(format!("generator config in checkpoint: {e}")))?;
        let mut template = Self::init(cfg, &mut ttvr_core::make_rng(0))?;
        template.params.load_from(ckpt, "")?;
        Ok(template)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    /// Loads a generator checkpoint; call [`Generator::freeze`] before training
    /// a projection against it.
    pub fn load_pretrained(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    /// Like [`Generator::load_pretrained`] but also requires the stored
    /// configuration to equal `expected`.
    pub fn load_pretrained_expecting(path: impl AsRef<Path>, expected: &GeneratorConfig) -> Result<Self> {
        let g = Self::load_pretrained(path)?;
        if g.cfg != *expected {
            return Err(Error::Integrity(format!(
                "generator checkpoint config {:?} does not match {:?}",
                g.cfg, expected
            )));
        }
        Ok(g)
    }

    /// Latent → style vector `w` through pixel normalization and the mapping MLP.
    pub fn mapping<R: Real>(&self, g: &mut GraphOf<R>, p: &Bound, z: Var) -> Var {
        let d = self.cfg.latent_dim as f32;
        let b = g.shape(z)[0];
        let sq = g.square(z);
        let ms = g.sum_last_axis(sq);
        let ms = g.scale(ms, 1.0 / d);
        let ms = g.add_scalar(ms, 1e-8);
        let inv = g.rsqrt(ms);
        let inv = g.reshape(inv, &[b, 1]);
        let mut x = g.mul(z, inv);
        for j in 0..self.cfg.mapping_layers {
            let y = dense(g, p, &format!("mapping.fc{j}"), x);
            x = g.leaky_relu(y, LRELU_SLOPE);
        }
        x
    }

    /// One synthesis block `L_i`: upsample (levels > 0), modulated 3×3 conv,
    /// noise injection, bias, leaky ReLU. `prev` is ignored at level 0.
    pub fn synth_layer<R: Real>(
        &self,
        g: &mut GraphOf<R>,
        p: &Bound,
        level: usize,
        prev: Option<Var>,
        w: Var,
        noise: Var,
    ) -> Var {
        let pre = format!("synthesis.level{level}");
        let b = g.shape(w)[0];
        let x = if level == 0 {
            let c = p.var("synthesis.const");
            let ones = g.constant(Tensor::ones(&[b, 1, 1, 1]));
            g.mul(c, ones)
        } else {
            let prev = prev.expect("levels above 0 need the previous features");
            g.upsample2x(prev)
        };
        let style = dense(g, p, &format!("{pre}.affine"), w);
        let weight = p.var(&format!("{pre}.conv.weight"));
        let xm = scale_channels(g, x, style);
        let y = g.conv2d(xm, weight, 1);
        // Demodulation: rsqrt(sum_{in,k} (w * s)^2) per (sample, out channel).
        let [co, ci] = [g.shape(weight)[0], g.shape(weight)[1]];
        let w2 = g.square(weight);
        let w2 = g.reshape(w2, &[co, ci, 9]);
        let w2 = g.sum_last_axis(w2);
        let s2 = g.square(style);
        let energy = g.linear(s2, w2);
        let energy = g.add_scalar(energy, DEMOD_EPS);
        let demod = g.rsqrt(energy);
        let y = scale_channels(g, y, demod);
        let strength = p.var(&format!("{pre}.noise_strength"));
        let strength = g.reshape(strength, &[1, 1, 1, 1]);
        let n = g.mul(noise, strength);
        let y = g.add(y, n);
        let y = add_bias(g, y, p.var(&format!("{pre}.conv.bias")));
        g.leaky_relu(y, LRELU_SLOPE)
    }

    fn to_rgb<R: Real>(&self, g: &mut GraphOf<R>, p: &Bound, level: usize, x: Var, w: Var) -> Var {
        let pre = format!("synthesis.level{level}.torgb");
        let style = dense(g, p, &format!("{pre}.affine"), w);
        let xm = scale_channels(g, x, style);
        let y = g.conv2d(xm, p.var(&format!("{pre}.weight")), 0);
        add_bias(g, y, p.var(&format!("{pre}.bias")))
    }

    /// Full synthesis pass. `mods[i]` (when given) is the `(B, 2·C_i, r, r)`
    /// decoder feature for level `i`.
    pub fn synthesize<R: Real>(
        &self,
        g: &mut GraphOf<R>,
        p: &Bound,
        z: Var,
        mods: Option<&[Var]>,
        noise: &[Var],
    ) -> SynthesisOutput {
        let w = self.mapping(g, p, z);
        let mut feat: Option<Var> = None;
        let mut rgb: Option<Var> = None;
        let mut features = Vec::with_capacity(self.cfg.n_levels());
        for level in 0..self.cfg.n_levels() {
            let mut x = self.synth_layer(g, p, level, feat, w, noise[level]);
            if let Some(mods) = mods {
                let c = self.cfg.channels(level);
                let mean = g.slice_channels(mods[level], 0, c);
                let raw_std = g.slice_channels(mods[level], c, c);
                let std = g.add_scalar(raw_std, 1.0);
                let shifted = g.add(x, mean);
                x = g.mul(shifted, std);
            }
            features.push(x);
            let y = self.to_rgb(g, p, level, x, w);
            rgb = Some(match rgb {
                None => y,
                Some(r) => {
                    let up = g.upsample2x(r);
                    g.add(up, y)
                }
            });
            feat = Some(x);
        }
        let rgb = rgb.expect("at least one level");
        let half = g.scale(rgb, 0.5);
        let pre_clamp = g.add_scalar(half, 0.5);
        let image = g.clamp(pre_clamp, 0.0, 1.0);
        SynthesisOutput {
            pre_clamp,
            image,
            features,
        }
    }

    fn check_latent(&self, z: &LatentCode) -> Result<()> {
        let s = z.0.shape();
        if s.len() != 2 || s[1] != self.cfg.latent_dim {
            return Err(Error::Argument(format!(
                "latent batch must be (B, {}), got {s:?}",
                self.cfg.latent_dim
            )));
        }
        if !z.0.is_finite() {
            return Err(Error::Argument("latent code has non-finite entries".into()));
        }
        Ok(())
    }

    fn run(
        &self,
        z: &LatentCode,
        mods: Option<&ModulationPyramid>,
        noise: &NoiseSeeds,
    ) -> Result<(Tensor, Tensor)> {
        self.ensure_loaded()?;
        self.check_latent(z)?;
        let b = z.batch();
        if let Some(m) = mods {
            m.check(&self.cfg, b)?;
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.0.clone());
        let noise: Vec<Var> = noise
            .all_levels(&self.cfg, b)
            .into_iter()
            .map(|t| g.constant(t))
            .collect();
        let mods: Option<Vec<Var>> = mods.map(|m| m.levels.iter().map(|t| g.constant(t.clone())).collect());
        let out = self.synthesize(&mut g, &p, zv, mods.as_deref(), &noise);
        Ok((g.value(out.image).clone(), g.value(out.pre_clamp).clone()))
    }

    /// Unmodulated synthesis of one image per latent row.
    pub fn generate(&self, z: &LatentCode, noise: &NoiseSeeds) -> Result<Vec<Image>> {
        let (img, _) = self.run(z, None, noise)?;
        batch_to_images(&img, ColorSpace::Rgb)
    }

    pub fn generate_modulated(
        &self,
        z: &LatentCode,
        mods: &ModulationPyramid,
        noise: &NoiseSeeds,
    ) -> Result<Vec<Image>> {
        let (img, _) = self.run(z, Some(mods), noise)?;
        batch_to_images(&img, ColorSpace::Rgb)
    }

    /// Output before the final clamp, `(B, 3, R, R)`.
    pub fn generate_pre_clamp(
        &self,
        z: &LatentCode,
        mods: Option<&ModulationPyramid>,
        noise: &NoiseSeeds,
    ) -> Result<Tensor> {
        Ok(self.run(z, mods, noise)?.1)
    }

    /// Evaluates a single synthesis block on concrete tensors. `w` is the
    /// mapped style batch `(B, latent_dim)`; `prev` is ignored at level 0.
    pub fn synth_layer_eval(
        &self,
        level: usize,
        prev: Option<&Tensor>,
        w: &Tensor,
        noise: &Tensor,
    ) -> Result<Tensor> {
        self.ensure_loaded()?;
        if level >= self.cfg.n_levels() {
            return Err(Error::Argument(format!("level {level} out of range")));
        }
        let b = w.shape()[0];
        if w.shape() != [b, self.cfg.latent_dim] {
            return Err(Error::Argument(format!("style batch has shape {:?}", w.shape())));
        }
        let r = self.cfg.level_resolution(level);
        if noise.shape() != [b, 1, r, r] {
            return Err(Error::Argument(format!(
                "level {level} noise must be {:?}, got {:?}",
                [b, 1, r, r],
                noise.shape()
            )));
        }
        if level > 0 {
            let want = [b, self.cfg.input_channels(level), r / 2, r / 2];
            match prev {
                Some(t) if t.shape() == want => {}
                Some(t) => {
                    return Err(Error::Argument(format!(
                        "level {level} input must be {want:?}, got {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Argument(format!("level {level} needs input features"))),
            }
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let prev = prev.map(|t| g.constant(t.clone()));
        let w = g.constant(w.clone());
        let n = g.constant(noise.clone());
        let out = self.synth_layer(&mut g, &p, level, prev, w, n);
        Ok(g.value(out).clone())
    }

    /// Mapped styles for a latent batch.
    pub fn map_latent(&self, z: &LatentCode) -> Result<Tensor> {
        self.ensure_loaded()?;
        self.check_latent(z)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.constant(z.0.clone());
        let w = self.mapping(&mut g, &p, zv);
        Ok(g.value(w).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ttvr_core::make_rng;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            output_resolution: 16,
            base_channels: 4,
            max_channels: 8,
            latent_dim: 8,
            mapping_layers: 1,
        }
    }

    #[test]
    fn level_chain_and_channels() {
        let c = GeneratorConfig::default();
        assert_eq!(c.n_levels(), 5);
        let res: Vec<usize> = (0..5).map(|i| c.level_resolution(i)).collect();
        assert_eq!(res, vec![4, 8, 16, 32, 64]);
        let ch: Vec<usize> = (0..5).map(|i| c.channels(i)).collect();
        assert_eq!(ch, vec![64, 64, 64, 32, 16]);
    }

    #[test]
    fn unloaded_generator_is_state_error() {
        let g = Generator::unloaded(small());
        let z = LatentCode(Tensor::zeros(&[1, 8]));
        let err = g.generate(&z, &NoiseSeeds::new(make_rng(0))).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }

    #[test]
    fn pyramid_mismatch_is_argument_error() {
        let g = Generator::init(small(), &mut make_rng(1)).unwrap();
        let z = LatentCode::random(1, 8, &mut make_rng(2));
        let mut mods = ModulationPyramid::zeros(g.config(), 1);
        mods.levels.pop();
        let err = g.generate_modulated(&z, &mods, &NoiseSeeds::new(make_rng(3))).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn synth_layer_shape_mismatch() {
        let g = Generator::init(small(), &mut make_rng(1)).unwrap();
        let w = Tensor::zeros(&[1, 8]);
        let bad_prev = Tensor::zeros(&[1, 3, 4, 4]);
        let noise = Tensor::zeros(&[1, 1, 8, 8]);
        assert!(g.synth_layer_eval(1, Some(&bad_prev), &w, &noise).is_err());
        assert!(g.synth_layer_eval(0, None, &w, &noise).is_err());
    }

    #[test]
    fn frozen_generator_refuses_mutation() {
        let mut g = Generator::init(small(), &mut make_rng(1)).unwrap().freeze();
        assert!(g.params_mut().is_err());
    }
}
