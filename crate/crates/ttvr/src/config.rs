//! Run configuration.
//!
//! A configuration is a flat TOML table whose keys are exactly the names
//! accepted by `--set key=value` on the command line. Resolution order is
//! preset, then config file, then command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ttvr_core::{Error, Result};

pub const PAPER512: &str = include_str!("../configs/paper512.toml");
pub const DESK64: &str = include_str!("../configs/desk64.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper512,
    Desk64,
}

impl Preset {
    pub fn source(self) -> &'static str {
        match self {
            Preset::Paper512 => PAPER512,
            Preset::Desk64 => DESK64,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "paper512" => Ok(Preset::Paper512),
            "desk64" => Ok(Preset::Desk64),
            other => Err(Error::Argument(format!(
                "unknown preset {other:?} (expected paper512 or desk64)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub resolution: usize,
    pub latent_dim: usize,
    pub gen_base_channels: usize,
    pub gen_max_channels: usize,
    pub mapping_layers: usize,

    pub proj_downsample_layers: usize,
    pub proj_upsample_layers: usize,
    pub proj_base_channels: usize,
    pub proj_max_channels: usize,
    pub conv_kernel: usize,

    pub lambda_adv: f32,
    pub lambda_per: f32,
    pub lambda_id: f32,
    pub adv_form: String,
    pub r1_gamma: f32,
    pub r1_every: usize,

    pub batch_size: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    pub lr0: f32,
    pub d_lr: f32,
    pub lr_halve_at: usize,
    pub total_iters: usize,
    pub checkpoint_every: usize,
    pub grad_clip: f32,

    pub pretrain_iters: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f32,

    pub blur_kernel_size: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub anisotropic_prob: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    pub noise_max: f64,

    pub backbone_seed: u64,
    pub phi_path: String,
    pub eta_path: String,
    pub eta_embed_dim: usize,

    pub niqe_patch_size: usize,
    pub niqe_sharpness: f64,

    pub toy_subjects: usize,
    pub toy_variations: usize,
    pub split: String,
}

impl Config {
    pub fn preset(p: Preset) -> Self {
        Self::from_toml_str(p.source()).expect("shipped presets parse")
    }

    pub fn from_toml_str(src: &str) -> Result<Self> {
        let cfg: Config =
            toml::from_str(src).map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Starts from `preset`, overlays the keys of `file` (if any), then applies
    /// `key=value` overrides.
    pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(preset.source())
            .map_err(|e| Error::Format(format!("preset: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: toml::Table = toml::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            for (k, v) in overlay {
                if !table.contains_key(&k) {
                    return Err(Error::Argument(format!("unknown config key {k:?}")));
                }
                table.insert(k, v);
            }
        }
        for item in overrides {
            let (k, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Argument(format!("override {item:?} is not key=value")))?;
            let k = k.trim();
            let old = table
                .get(k)
                .ok_or_else(|| Error::Argument(format!("unknown config key {k:?}")))?;
            let value = parse_like(old, raw.trim())
                .ok_or_else(|| Error::Argument(format!("cannot parse {raw:?} for key {k:?}")))?;
            table.insert(k.to_string(), value);
        }
        let cfg: Config = table
            .try_into()
            .map_err(|e| Error::Format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the resolved configuration, recorded in checkpoints.
    pub fn hash(&self) -> String {
        let text = self.to_toml();
        let h = text
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
        format!("{h:016x}")
    }

    pub fn validate(&self) -> Result<()> {
        let arg = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Argument(msg.to_string()))
            }
        };
        arg(
            self.resolution.is_power_of_two() && self.resolution >= 8,
            "resolution must be a power of two >= 8",
        )?;
        let levels = self.resolution.trailing_zeros() as usize - 1;
        arg(
            self.proj_downsample_layers + 1 == levels,
            "proj_downsample_layers must equal log2(resolution) - 2 (4x4 bottleneck)",
        )?;
        arg(
            self.proj_upsample_layers == self.proj_downsample_layers,
            "proj_upsample_layers must match proj_downsample_layers",
        )?;
        arg(self.conv_kernel % 2 == 1, "conv_kernel must be odd")?;
        arg(self.latent_dim > 0 && self.mapping_layers > 0, "latent_dim and mapping_layers must be positive")?;
        arg(
            self.gen_base_channels > 0 && self.gen_max_channels >= self.gen_base_channels,
            "generator channels must satisfy 0 < base <= max",
        )?;
        arg(
            self.proj_base_channels > 0 && self.proj_max_channels >= self.proj_base_channels,
            "projection channels must satisfy 0 < base <= max",
        )?;
        arg(
            self.lambda_adv >= 0.0 && self.lambda_per >= 0.0 && self.lambda_id >= 0.0,
            "loss weights must be non-negative",
        )?;
        arg(
            matches!(self.adv_form.as_str(), "literal" | "nonsaturating"),
            "adv_form must be literal or nonsaturating",
        )?;
        arg(self.batch_size > 0 && self.pretrain_batch > 0, "batch sizes must be positive")?;
        arg(self.lr0 > 0.0 && self.d_lr > 0.0 && self.pretrain_lr > 0.0, "learning rates must be positive")?;
        arg(self.lr_halve_at <= self.total_iters, "lr_halve_at must not exceed total_iters")?;
        arg(self.r1_every > 0, "r1_every must be positive")?;
        arg(self.blur_kernel_size % 2 == 1, "blur_kernel_size must be odd")?;
        arg(
            matches!(self.split.as_str(), "vis-th" | "arl-vtf"),
            "split must be vis-th or arl-vtf",
        )?;
        arg(self.toy_subjects >= 2, "toy_subjects must be at least 2")?;
        Ok(())
    }

    pub fn n_levels(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }
}

fn parse_like(old: &toml::Value, raw: &str) -> Option<toml::Value> {
    use toml::Value;
    Some(match old {
        Value::Integer(_) => Value::Integer(raw.replace('_', "").parse().ok()?),
        Value::Float(_) => Value::Float(raw.parse().ok()?),
        Value::Boolean(_) => Value::Boolean(raw.parse().ok()?),
        Value::String(_) => Value::String(raw.to_string()),
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        let p = Config::preset(Preset::Paper512);
        assert_eq!(p.resolution, 512);
        assert_eq!(p.n_levels(), 8);
        let d = Config::preset(Preset::Desk64);
        assert_eq!(d.resolution, 64);
        assert_eq!(d.proj_downsample_layers, 4);
    }

    #[test]
    fn overrides_take_precedence() {
        let c = Config::resolve(
            Preset::Desk64,
            None,
            &["total_iters=50".into(), "lr_halve_at=40".into(), "lr0=1e-3".into()],
        )
        .unwrap();
        assert_eq!((c.total_iters, c.lr_halve_at, c.lr0), (50, 40, 1e-3));
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(Config::resolve(Preset::Desk64, None, &["nope=1".into()]).is_err());
        assert!(Config::resolve(Preset::Desk64, None, &["lr0".into()]).is_err());
    }

    #[test]
    fn file_overlay_and_snapshot_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "batch_size = 2\nsplit = \"arl-vtf\"\n").unwrap();
        let c = Config::resolve(Preset::Desk64, Some(&path), &["batch_size=3".into()]).unwrap();
        assert_eq!(c.batch_size, 3);
        assert_eq!(c.split, "arl-vtf");
        assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn bottleneck_law_enforced() {
        let err = Config::resolve(Preset::Desk64, None, &["proj_downsample_layers=3".into()]);
        assert!(err.is_err());
    }
}
