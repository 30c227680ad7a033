//! Flat `key = value` run configuration with validation and a stable hash.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, CodecTrainConfig};
use crate::diffusion::{NoiseSchedule, SamplerKind, SftSites, UNetConfig};
use crate::error::{Error, Result};
use crate::radiance_field::RegWeights;
use crate::restoration::{CfwConfig, SamplerConfig, Stage2Weights};
use crate::scene::{AnalyticScene, ViewSetConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,

    pub stripe_freq: f64,
    pub checker_freq: f64,
    pub resolution: usize,
    pub spp: usize,
    pub reference_samples: usize,
    pub n_train: usize,
    pub n_test: usize,

    pub grid_resolution: usize,
    pub grid_lr: f64,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub rays_per_step: usize,
    pub reg_tv: f64,
    pub reg_l1: f64,

    pub codec_downsample: usize,
    pub codec_latent_channels: usize,
    pub codec_width: usize,
    pub codec_steps: usize,
    pub codec_batch: usize,
    pub codec_lr: f64,
    pub codec_patches: usize,

    pub prior_steps: usize,
    pub prior_batch: usize,
    pub prior_lr: f64,

    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub unet_channels: [usize; 3],
    pub temb_dim: usize,
    pub sft_sites: SftSites,
    pub sampler: SamplerKind,
    pub sampler_steps: usize,

    pub stage1_steps: usize,
    pub pixel_fraction: f64,
    pub lambda: f64,
    pub separate_stage1: bool,
    pub patch_size: usize,
    pub subpatch_width: usize,
    pub subpatch_height: usize,
    pub diffusion_lr: f64,
    pub diffusion_batch: usize,

    pub tile: usize,
    pub tile_stride: usize,
    pub tile_sigma: f64,

    pub stage2_steps: usize,
    pub stage2_lr: f64,
    pub disc_lr: f64,
    pub stage2_batch: usize,
    pub stage2_sample_steps: usize,
    pub stage2_pool: usize,
    pub stage2_val: usize,
    pub lambda_p: f64,
    pub lambda_g: f64,
    pub cfw_features: usize,
    pub cfw_growth: usize,

    pub w: f64,
    pub eval_interval: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stripe_freq: 14.0,
            checker_freq: 28.0,
            resolution: 128,
            spp: 8,
            reference_samples: 256,
            n_train: 12,
            n_test: 4,
            grid_resolution: 24,
            grid_lr: 0.02,
            train_samples: 64,
            eval_samples: 128,
            rays_per_step: 512,
            reg_tv: 1e-3,
            reg_l1: 1e-4,
            codec_downsample: 4,
            codec_latent_channels: 4,
            codec_width: 32,
            codec_steps: 3000,
            codec_batch: 8,
            codec_lr: 2e-3,
            codec_patches: 2048,
            prior_steps: 2000,
            prior_batch: 16,
            prior_lr: 2e-4,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            unet_channels: [32, 64, 128],
            temb_dim: 128,
            sft_sites: SftSites::Decoder,
            sampler: SamplerKind::Ddim,
            sampler_steps: 20,
            stage1_steps: 6000,
            pixel_fraction: 0.5,
            lambda: 1.0,
            separate_stage1: false,
            patch_size: 32,
            subpatch_width: 32,
            subpatch_height: 16,
            diffusion_lr: 5e-5,
            diffusion_batch: 8,
            tile: 8,
            tile_stride: 4,
            tile_sigma: 2.0,
            stage2_steps: 2000,
            stage2_lr: 1e-3,
            disc_lr: 1e-3,
            stage2_batch: 4,
            stage2_sample_steps: 20,
            stage2_pool: 256,
            stage2_val: 32,
            lambda_p: 1.0,
            lambda_g: 0.05,
            cfw_features: 16,
            cfw_growth: 8,
            w: 1.0,
            eval_interval: 500,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key} expects true/false, got {v:?}"
        ))),
    }
}

fn parse_sites(v: &str) -> Result<SftSites> {
    match v {
        "decoder" => Ok(SftSites::Decoder),
        "encoder+decoder" => Ok(SftSites::EncoderAndDecoder),
        _ => Err(Error::Config(format!(
            "diffusion.sft_sites must be decoder or encoder+decoder, got {v:?}"
        ))),
    }
}

fn sites_str(s: SftSites) -> &'static str {
    match s {
        SftSites::Decoder => "decoder",
        SftSites::EncoderAndDecoder => "encoder+decoder",
    }
}

fn parse_channels(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs three comma-separated widths")))
}

macro_rules! config_keys {
    ($( $key:literal => $field:ident : $kind:ident ),* $(,)?) => {
        impl RunConfig {
            /// Every accepted key, in canonical order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key {
                    $($key => { config_keys!(@set self, $field, $kind, key, value); })*
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(config_keys!(@get self, $field, $kind)),)*
                    _ => None,
                }
            }
        }
    };
    (@set $s:ident, $f:ident, num, $k:ident, $v:ident) => { $s.$f = parse($k, $v)?; };
    (@set $s:ident, $f:ident, bool, $k:ident, $v:ident) => { $s.$f = parse_bool($k, $v)?; };
    (@set $s:ident, $f:ident, sites, $k:ident, $v:ident) => { $s.$f = parse_sites($v)?; };
    (@set $s:ident, $f:ident, channels, $k:ident, $v:ident) => { $s.$f = parse_channels($k, $v)?; };
    (@get $s:ident, $f:ident, num) => { $s.$f.to_string() };
    (@get $s:ident, $f:ident, bool) => { $s.$f.to_string() };
    (@get $s:ident, $f:ident, sites) => { sites_str($s.$f).to_string() };
    (@get $s:ident, $f:ident, channels) => {
        $s.$f.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
    };
}

config_keys! {
    "seed" => seed: num,
    "scene.stripe_freq" => stripe_freq: num,
    "scene.checker_freq" => checker_freq: num,
    "scene.resolution" => resolution: num,
    "scene.spp" => spp: num,
    "scene.reference_samples" => reference_samples: num,
    "scene.n_train" => n_train: num,
    "scene.n_test" => n_test: num,
    "grid.resolution" => grid_resolution: num,
    "grid.lr" => grid_lr: num,
    "grid.train_samples" => train_samples: num,
    "grid.eval_samples" => eval_samples: num,
    "grid.rays_per_step" => rays_per_step: num,
    "grid.reg_tv" => reg_tv: num,
    "grid.reg_l1" => reg_l1: num,
    "codec.downsample" => codec_downsample: num,
    "codec.latent_channels" => codec_latent_channels: num,
    "codec.width" => codec_width: num,
    "codec.steps" => codec_steps: num,
    "codec.batch" => codec_batch: num,
    "codec.lr" => codec_lr: num,
    "codec.patches" => codec_patches: num,
    "prior.steps" => prior_steps: num,
    "prior.batch" => prior_batch: num,
    "prior.lr" => prior_lr: num,
    "diffusion.timesteps" => timesteps: num,
    "diffusion.beta_start" => beta_start: num,
    "diffusion.beta_end" => beta_end: num,
    "diffusion.channels" => unet_channels: channels,
    "diffusion.temb_dim" => temb_dim: num,
    "diffusion.sft_sites" => sft_sites: sites,
    "diffusion.sampler" => sampler: num,
    "diffusion.steps" => sampler_steps: num,
    "stage1.steps" => stage1_steps: num,
    "stage1.pixel_fraction" => pixel_fraction: num,
    "stage1.lambda" => lambda: num,
    "stage1.separate" => separate_stage1: bool,
    "stage1.patch_size" => patch_size: num,
    "stage1.subpatch_width" => subpatch_width: num,
    "stage1.subpatch_height" => subpatch_height: num,
    "stage1.diffusion_lr" => diffusion_lr: num,
    "stage1.diffusion_batch" => diffusion_batch: num,
    "tiling.tile" => tile: num,
    "tiling.stride" => tile_stride: num,
    "tiling.sigma" => tile_sigma: num,
    "stage2.steps" => stage2_steps: num,
    "stage2.lr" => stage2_lr: num,
    "stage2.disc_lr" => disc_lr: num,
    "stage2.batch" => stage2_batch: num,
    "stage2.sample_steps" => stage2_sample_steps: num,
    "stage2.pool" => stage2_pool: num,
    "stage2.val" => stage2_val: num,
    "stage2.lambda_p" => lambda_p: num,
    "stage2.lambda_g" => lambda_g: num,
    "stage2.cfw_features" => cfw_features: num,
    "stage2.cfw_growth" => cfw_growth: num,
    "restore.w" => w: num,
    "eval.interval" => eval_interval: num,
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        Self::KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        Self::KEYS
            .iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_train == 0 || self.n_test == 0 {
            return bad("scene.n_train and scene.n_test must be >= 1".into());
        }
        if self.spp == 0
            || self.reference_samples == 0
            || self.train_samples == 0
            || self.eval_samples == 0
        {
            return bad("sample counts must be >= 1".into());
        }
        if self.resolution < 16 || self.resolution % self.codec_downsample != 0 {
            return bad(format!(
                "scene.resolution must be >= 16 and a multiple of codec.downsample, got {}",
                self.resolution
            ));
        }
        if !(0.0..=1.0).contains(&self.pixel_fraction) {
            return bad("stage1.pixel_fraction must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.w) {
            return bad("restore.w must lie in [0, 1]".into());
        }
        if self.lambda < 0.0 || self.lambda_p < 0.0 || self.lambda_g < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.patch_size % self.codec_downsample != 0
            || (self.patch_size / self.codec_downsample) % 4 != 0
        {
            return bad("stage1.patch_size / codec.downsample must be a multiple of 4".into());
        }
        if self.patch_size > self.resolution {
            return bad("stage1.patch_size exceeds the image resolution".into());
        }
        if self.tile % 4 != 0 || self.tile == 0 {
            return bad("tiling.tile must be a positive multiple of 4".into());
        }
        if self.tile_stride == 0 || self.tile_stride > self.tile {
            return bad("tiling.stride must lie in 1..=tiling.tile".into());
        }
        if self.sampler_steps == 0
            || self.sampler_steps > self.timesteps
            || self.stage2_sample_steps == 0
        {
            return bad("sampler steps must lie in 1..=diffusion.timesteps".into());
        }
        if self.codec_batch == 0
            || self.prior_batch == 0
            || self.stage2_batch == 0
            || self.diffusion_batch == 0
            || self.stage2_pool == 0
            || self.stage2_val == 0
        {
            return bad("batch sizes must be >= 1".into());
        }
        if self.eval_interval == 0 {
            return bad("eval.interval must be >= 1".into());
        }
        self.scene().validate()?;
        self.codec_config().validate()?;
        self.schedule()?;
        crate::radiance_field::PatchSampler::new(
            (self.patch_size, self.patch_size),
            (self.subpatch_width, self.subpatch_height),
        )?;
        Ok(())
    }

    pub fn scene(&self) -> AnalyticScene {
        AnalyticScene::with_frequencies(self.stripe_freq, self.checker_freq)
    }

    pub fn viewset_config(&self) -> ViewSetConfig {
        ViewSetConfig {
            n_train: self.n_train,
            n_test: self.n_test,
            resolution: self.resolution,
            spp: self.spp,
            samples_per_ray: self.reference_samples,
            ..ViewSetConfig::default()
        }
    }

    pub fn reg_weights(&self) -> RegWeights {
        RegWeights {
            tv: self.reg_tv,
            l1: self.reg_l1,
        }
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            downsample: self.codec_downsample,
            latent_channels: self.codec_latent_channels,
            base_width: self.codec_width,
            ..CodecConfig::default()
        }
    }

    pub fn codec_train_config(&self) -> CodecTrainConfig {
        CodecTrainConfig {
            steps: self.codec_steps,
            batch: self.codec_batch,
            lr: self.codec_lr,
            seed: self.seed,
        }
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            latent_channels: self.codec_latent_channels,
            channels: self.unet_channels,
            temb_dim: self.temb_dim,
            sft_sites: self.sft_sites,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            kind: self.sampler,
            steps: self.sampler_steps,
            tile: self.tile,
            stride: self.tile_stride,
            tile_sigma: self.tile_sigma,
        }
    }

    pub fn cfw_config(&self) -> CfwConfig {
        CfwConfig {
            features: self.cfw_features,
            growth: self.cfw_growth,
        }
    }

    pub fn stage2_weights(&self) -> Stage2Weights {
        Stage2Weights {
            perceptual: self.lambda_p,
            adversarial: self.lambda_g,
        }
    }
}
