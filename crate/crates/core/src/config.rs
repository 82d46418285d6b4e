//! Run configuration: one flat struct covering every module, serialized as
//! JSON into checkpoints and run directories, and readable from a simple
//! `key = value` text file with CLI overrides on top.

use std::path::Path;

fn default_lambda_diversity() -> f64 {
    8.0
}

use serde::{Deserialize, Serialize};

use crate::adversarial::{DiscriminatorConfig, LossWeights};
use crate::data::SceneConfig;
use crate::diversity::MappingConfig;
use crate::error::{Error, Result};
use crate::generator::{ConditioningMode, GeneratorConfig};
use crate::mask_embedder::EmbedderConfig;
use crate::style_encoder::EncoderConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub num_classes: usize,
    pub resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub style_correlation: f64,
    pub base_resolution: usize,
    pub block_widths: Vec<usize>,
    pub self_attention_cutoff: usize,
    pub encoder_filters: usize,
    pub encoder_down_layers: usize,
    pub encoder_up_layers: usize,
    pub style_code_dim: usize,
    pub disc_scales: usize,
    pub disc_base_width: usize,
    pub disc_layers: usize,
    pub lambda_feat_match: f64,
    pub lambda_perceptual: f64,
    pub lambda_attention: f64,
    /// Weight on the image-diversity term during the mapping phase. Older
    /// serialized configs predate this knob, hence the serde default.
    #[serde(default = "default_lambda_diversity")]
    pub lambda_diversity: f64,
    pub perceptual_seed: u64,
    pub no_group_conv: bool,
    pub no_mask_embedder: bool,
    pub no_cross_attention: bool,
    pub no_attention_loss: bool,
}

impl RunConfig {
    /// Small configuration that trains in minutes on one CPU core:
    /// 4 classes at 64 x 64.
    pub fn desk() -> Self {
        RunConfig {
            num_classes: 4,
            resolution: 64,
            epochs: 2,
            batch_size: 4,
            seed: 7,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            train_scenes: 2000,
            test_scenes: 200,
            style_correlation: 0.5,
            base_resolution: 8,
            block_widths: vec![16, 16, 8],
            self_attention_cutoff: 16,
            encoder_filters: 4,
            encoder_down_layers: 4,
            encoder_up_layers: 3,
            style_code_dim: 64,
            disc_scales: 2,
            disc_base_width: 16,
            disc_layers: 3,
            lambda_feat_match: 10.0,
            lambda_perceptual: 10.0,
            lambda_attention: 1.0,
            lambda_diversity: default_lambda_diversity(),
            perceptual_seed: 1234,
            no_group_conv: false,
            no_mask_embedder: false,
            no_cross_attention: false,
            no_attention_loss: false,
        }
    }

    /// Full-scale configuration: 19 classes at 256 x 256, style codes
    /// 19 x 1280, self-attention at 16/32/64.
    pub fn full_scale(num_classes: usize) -> Self {
        RunConfig {
            num_classes,
            resolution: 256,
            epochs: 100,
            batch_size: 4,
            base_resolution: 8,
            block_widths: vec![256, 128, 64, 32, 16],
            self_attention_cutoff: 64,
            encoder_filters: 4,
            encoder_down_layers: 6,
            encoder_up_layers: 5,
            style_code_dim: 256,
            train_scenes: 2000,
            test_scenes: 200,
            ..RunConfig::desk()
        }
    }

    pub fn style_width(&self) -> usize {
        self.encoder_up_layers * self.style_code_dim
    }

    pub fn validate(&self) -> Result<()> {
        let gen_out = self.base_resolution << self.block_widths.len();
        if gen_out != self.resolution {
            return Err(Error::Config(format!(
                "generator output {gen_out} (base {} x 2^{}) != dataset resolution {}",
                self.base_resolution,
                self.block_widths.len(),
                self.resolution
            )));
        }
        if self.resolution % (1 << self.encoder_down_layers) != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by encoder downsampling 2^{}",
                self.resolution, self.encoder_down_layers
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        self.scene_config().validate()?;
        Ok(())
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            num_classes: self.num_classes,
            filters_per_group: self.encoder_filters,
            down_layers: self.encoder_down_layers,
            up_layers: self.encoder_up_layers,
            code_dim: self.style_code_dim,
            grouped: !self.no_group_conv,
            input_mixing: true,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_classes: self.num_classes,
            style_width: self.style_width(),
            base_resolution: self.base_resolution,
            block_widths: self.block_widths.clone(),
            self_attention_cutoff: self.self_attention_cutoff,
            conditioning: if self.no_cross_attention {
                ConditioningMode::MaskModulation
            } else {
                ConditioningMode::CrossAttention
            },
            embedded_seed: !self.no_mask_embedder,
        }
    }

    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            num_classes: self.num_classes,
            input_h: self.resolution,
            input_w: self.resolution,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            num_classes: self.num_classes,
            num_scales: self.disc_scales,
            base_width: self.disc_base_width,
            num_layers: self.disc_layers,
        }
    }

    pub fn mapping_config(&self) -> MappingConfig {
        MappingConfig::new(self.num_classes, self.style_width())
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            num_classes: self.num_classes,
            resolution: self.resolution,
            style_correlation: self.style_correlation,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            feat_match: self.lambda_feat_match,
            perceptual: self.lambda_perceptual,
            attention: if self.no_attention_loss {
                0.0
            } else {
                self.lambda_attention
            },
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// FNV-1a hash of the canonical JSON form; stamped into metrics records.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.to_json().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value {v:?} for key {key}")))
        }
        match key {
            "num_classes" => self.num_classes = p(key, value)?,
            "resolution" => self.resolution = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "beta1" => self.beta1 = p(key, value)?,
            "beta2" => self.beta2 = p(key, value)?,
            "train_scenes" => self.train_scenes = p(key, value)?,
            "test_scenes" => self.test_scenes = p(key, value)?,
            "style_correlation" => self.style_correlation = p(key, value)?,
            "base_resolution" => self.base_resolution = p(key, value)?,
            "block_widths" => {
                self.block_widths = value
                    .split(',')
                    .map(|v| p("block_widths", v))
                    .collect::<Result<_>>()?;
            }
            "self_attention_cutoff" => self.self_attention_cutoff = p(key, value)?,
            "encoder_filters" => self.encoder_filters = p(key, value)?,
            "encoder_down_layers" => self.encoder_down_layers = p(key, value)?,
            "encoder_up_layers" => self.encoder_up_layers = p(key, value)?,
            "style_code_dim" => self.style_code_dim = p(key, value)?,
            "disc_scales" => self.disc_scales = p(key, value)?,
            "disc_base_width" => self.disc_base_width = p(key, value)?,
            "disc_layers" => self.disc_layers = p(key, value)?,
            "lambda_feat_match" => self.lambda_feat_match = p(key, value)?,
            "lambda_perceptual" => self.lambda_perceptual = p(key, value)?,
            "lambda_attention" => self.lambda_attention = p(key, value)?,
            "lambda_diversity" => self.lambda_diversity = p(key, value)?,
            "perceptual_seed" => self.perceptual_seed = p(key, value)?,
            "no_group_conv" => self.no_group_conv = p(key, value)?,
            "no_mask_embedder" => self.no_mask_embedder = p(key, value)?,
            "no_cross_attention" => self.no_cross_attention = p(key, value)?,
            "no_attention_loss" => self.no_attention_loss = p(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Load `key = value` lines over the desk defaults. `#` starts a comment.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::desk();
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key = value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}
