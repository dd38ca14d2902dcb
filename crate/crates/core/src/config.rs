//! Flat `key = value` run configuration shared by every command.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! skipped. Unknown or repeated keys are rejected, so a typo never silently
//! falls back to a default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::ape::{ApeConfig, ApeVariant};
use crate::decoder::{DecoderConfig, NoiseMode};
use crate::discriminator::DiscriminatorConfig;
use crate::encoder::StyleInvConfig;
use crate::error::{Error, Result};
use crate::training::{Ablation, GanConfig, InversionConfig, TrainConfig};
use crate::transfer::FinetuneConfig;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "STYLEINV_SEED";

fn parse_value<V: FromStr>(key: &str, raw: &str) -> Result<V>
where
    V::Err: Display,
{
    raw.parse().map_err(|e| Error::Config(format!("{key} = {raw:?}: {e}")))
}

macro_rules! run_config {
    ($($field:ident : $ty:ty = $key:literal => $default:expr),* $(,)?) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(pub $field: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $($field: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
                match key {
                    $($key => self.$field = parse_value(key, raw)?,)*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, self.$field.to_string())),*]
            }
        }
    };
}

run_config! {
    seed: u64 = "seed" => 0,
    out_dir: String = "out_dir" => "runs/default".into(),

    data_videos: usize = "data.videos" => 64,
    data_length: usize = "data.length" => 128,
    data_seed: u64 = "data.seed" => 1,

    resolution: usize = "model.resolution" => 64,
    img_channels: usize = "model.channels" => 3,
    z_dim: usize = "model.z_dim" => 64,
    w_dim: usize = "model.w_dim" => 64,
    channel_base: usize = "model.channel_base" => 1024,
    channel_max: usize = "model.channel_max" => 64,
    mapping_layers: usize = "model.mapping_layers" => 4,
    layers_per_block: usize = "model.layers_per_block" => 2,
    noise_mode: NoiseMode = "model.noise_mode" => NoiseMode::ConstantPerVideo,
    style_dim: usize = "model.style_dim" => 64,
    anchor_distance: f64 = "model.anchor_distance" => 32.0,
    first_frame_noise: bool = "model.first_frame_noise" => true,

    d_channel_max: usize = "disc.channel_max" => 64,
    d_feature_dim: usize = "disc.feature_dim" => 64,

    gan_steps: usize = "gan.steps" => 2000,
    gan_lr_g: f64 = "gan.lr_g" => 2e-3,
    gan_lr_d: f64 = "gan.lr_d" => 2e-3,
    gan_batch: usize = "gan.batch" => 8,
    gan_r1_gamma: f64 = "gan.r1_gamma" => 1.0,
    gan_r1_interval: usize = "gan.r1_interval" => 16,
    gan_w_avg_samples: usize = "gan.w_avg_samples" => 1000,

    inv_steps: usize = "inv.steps" => 500,
    inv_lr: f64 = "inv.lr" => 1e-3,
    inv_batch: usize = "inv.batch" => 8,

    train_steps: usize = "train.steps" => 1000,
    train_batch: usize = "train.batch" => 8,
    lambda_l2: f64 = "train.lambda_l2" => 10.0,
    lambda_reg: f64 = "train.lambda_reg" => 0.05,
    lr_encoder: f64 = "train.lr_encoder" => 1e-4,
    lr_d: f64 = "train.lr_d" => 2e-3,
    r1_gamma: f64 = "train.r1_gamma" => 1.0,
    r1_interval: usize = "train.r1_interval" => 16,
    max_t: usize = "train.max_t" => 127,
    ada_enabled: bool = "train.ada_enabled" => true,
    ada_target: f64 = "train.ada_target" => 0.6,
    ada_speed: f64 = "train.ada_speed" => 0.01,
    ada_interval: usize = "train.ada_interval" => 4,
    truncation: f64 = "train.truncation" => 1.0,
    ablation: Ablation = "train.ablation" => Ablation::Full,

    freeze_res: usize = "transfer.freeze_res" => 16,
    transfer_steps: usize = "transfer.steps" => 200,
    transfer_lr_g: f64 = "transfer.lr_g" => 2e-3,
    transfer_lr_d: f64 = "transfer.lr_d" => 2e-3,
    transfer_batch: usize = "transfer.batch" => 8,
    lambda_perceptual: f64 = "transfer.lambda_perceptual" => 1.0,
    lambda_identity: f64 = "transfer.lambda_identity" => 1.0,
    transfer_images: usize = "transfer.images" => 256,

    eval_clips: usize = "eval.clips" => 16,
    eval_frames: usize = "eval.frames" => 128,

    log_every: usize = "log_every" => 10,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if let Some(prev) = seen.insert(k.to_string(), n + 1) {
                return Err(Error::Config(format!("line {}: key {k:?} already set on line {prev}", n + 1)));
            }
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Rebuilds a config from `entries()` output, e.g. a checkpoint echo.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.entries().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    /// Applies `STYLEINV_SEED` if set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = parse_value(SEED_ENV, v.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder_config().validate()?;
        self.styleinv_config().ape.validate()?;
        self.styleinv_config().encoder.validate()?;
        self.train_config().validate()?;
        self.finetune_config().validate(self.resolution)?;
        if self.data_videos == 0 || self.data_length < 4 {
            return Err(Error::Config("dataset needs at least one video of length >= 4".into()));
        }
        if self.gan_batch == 0 || self.inv_batch == 0 || self.gan_r1_interval == 0 {
            return Err(Error::Config("batch sizes and intervals must be positive".into()));
        }
        if self.eval_clips < 2 || self.eval_frames < 2 {
            return Err(Error::Config("evaluation needs at least 2 clips of 2 frames".into()));
        }
        Ok(())
    }

    /// Seed for one pipeline stage, derived from the run seed.
    pub fn stage_seed(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
    }

    pub fn decoder_config(&self) -> DecoderConfig {
        DecoderConfig {
            z_dim: self.z_dim,
            w_dim: self.w_dim,
            img_resolution: self.resolution,
            img_channels: self.img_channels,
            channel_base: self.channel_base,
            channel_max: self.channel_max,
            mapping_layers: self.mapping_layers,
            layers_per_block: self.layers_per_block,
            noise_mode: self.noise_mode,
        }
    }

    pub fn styleinv_config(&self) -> StyleInvConfig {
        let base = StyleInvConfig::for_decoder(&self.decoder_config());
        let variant = if self.ablation == Ablation::NoApe { ApeVariant::Acyclic } else { ApeVariant::FirstFrameAware };
        StyleInvConfig {
            ape: ApeConfig { anchor_distance: self.anchor_distance, variant, ..base.ape },
            style_dim: self.style_dim,
            first_frame_noise: self.first_frame_noise,
            ..base
        }
    }

    pub fn disc_config(&self, frames: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            channel_max: self.d_channel_max,
            feature_dim: self.d_feature_dim,
            frames,
            ..DiscriminatorConfig::for_resolution(self.resolution, self.img_channels)
        }
    }

    pub fn gan_config(&self) -> GanConfig {
        GanConfig {
            lr_g: self.gan_lr_g,
            lr_d: self.gan_lr_d,
            r1_gamma: self.gan_r1_gamma,
            r1_interval: self.gan_r1_interval,
            batch: self.gan_batch,
            seed: self.stage_seed(1),
        }
    }

    pub fn inversion_config(&self) -> InversionConfig {
        InversionConfig { lr: self.inv_lr, batch: self.inv_batch, seed: self.stage_seed(2) }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_l2: self.lambda_l2,
            lambda_reg: self.lambda_reg,
            lr_encoder: self.lr_encoder,
            lr_d: self.lr_d,
            r1_gamma: self.r1_gamma,
            r1_interval: self.r1_interval,
            batch: self.train_batch,
            steps: self.train_steps,
            max_t: self.max_t,
            ada_enabled: self.ada_enabled,
            ada_target: self.ada_target,
            ada_speed: self.ada_speed,
            ada_interval: self.ada_interval,
            truncation: self.truncation,
            ablation: self.ablation,
            seed: self.stage_seed(3),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            freeze_res: self.freeze_res,
            lr_g: self.transfer_lr_g,
            lr_d: self.transfer_lr_d,
            batch: self.transfer_batch,
            r1_gamma: self.gan_r1_gamma,
            r1_interval: self.gan_r1_interval,
            lambda_perceptual: self.lambda_perceptual,
            lambda_identity: self.lambda_identity,
            seed: self.stage_seed(4),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(RunConfig::KEYS.len(), cfg.entries().len());
    }

    #[test]
    fn parse_applies_values_and_comments() {
        let cfg = RunConfig::parse("# run\nseed = 9\n\ntrain.ablation = no_ape\nmodel.noise_mode=off\n").unwrap();
        assert_eq!((cfg.seed, cfg.ablation, cfg.noise_mode), (9, Ablation::NoApe, NoiseMode::Off));
        assert_eq!(cfg.styleinv_config().ape.variant, ApeVariant::Acyclic);
    }

    #[test]
    fn malformed_input_is_a_config_error() {
        for text in [
            "sede = 1",
            "seed 1",
            "seed = one",
            "seed = 1\nseed = 2",
            "model.resolution = 48",
            "train.max_t = 2",
            "transfer.freeze_res = 64",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }
}
