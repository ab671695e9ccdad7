//! Flat `key = value` run configuration.
//!
//! `preset` is applied before every other key regardless of line order, so a
//! file can name a preset and override parts of it. Blank lines and `#`
//! comments are ignored; unknown keys are rejected with the valid list.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::csam::CsamConfig;
use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{BoundarySides, LossConfig};
use crate::optim::LrPreset;
use crate::phantom::{AugmentConfig, PhantomConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub csam: CsamConfig,
    pub decoder: DecoderConfig,
    pub use_csam: bool,
    pub freeze_backbone: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.use_csam {
            self.csam.validate()?;
            if self.csam.channels != self.encoder.embed_dim {
                return Err(Error::Config(format!(
                    "attention width {} differs from encoder width {}",
                    self.csam.channels, self.encoder.embed_dim
                )));
            }
            if self.csam.structures + 1 != self.decoder.num_classes {
                return Err(Error::Config(format!(
                    "{} structures need {} classes, decoder has {}",
                    self.csam.structures,
                    self.csam.structures + 1,
                    self.decoder.num_classes
                )));
            }
        }
        Ok(())
    }

    /// Output side of the logits before the final resize.
    pub fn fused_size(&self) -> usize {
        self.encoder.grid() * self.decoder.fused_scale
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optimizer: String,
    pub lr: LrPreset,
    pub lr_min_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub split: (f64, f64, f64),
    pub spacing_mm: f64,
    pub slice_thickness_mm: f64,
    pub phantom: PhantomConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

pub const KEYS: &[&str] = &[
    "preset",
    "seed",
    "epochs",
    "batch_size",
    "input_size",
    "patch_size",
    "embed_dim",
    "depth",
    "heads",
    "mlp_ratio",
    "encoder_seed",
    "freeze_backbone",
    "csam",
    "structures",
    "key_dim",
    "csam_heads",
    "width_multiplier",
    "reduction",
    "fused_scale",
    "brm_width",
    "stage_attention",
    "multi_scale",
    "brm",
    "alpha",
    "beta",
    "gamma",
    "lambda",
    "focal_gamma",
    "theta",
    "dice_eps",
    "boundary_sides",
    "optimizer",
    "lr_backbone",
    "lr_decoder",
    "weight_decay",
    "lr_min_ratio",
    "augment_rotation",
    "augment_scale_min",
    "augment_scale_max",
    "augment_elastic",
    "split",
    "spacing_mm",
    "slice_thickness_mm",
    "phantom_size",
    "phantom_slices",
    "phantom_noise",
    "systolic_factor",
];

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("`{key}` cannot take value `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true/false, got `{v}`"))),
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            preset: "desk".into(),
            model: ModelConfig {
                encoder: EncoderConfig::default(),
                csam: CsamConfig::default(),
                decoder: DecoderConfig { width_multiplier: 0.25, ..Default::default() },
                use_csam: true,
                freeze_backbone: true,
            },
            loss: LossConfig::default(),
            optimizer: "desk".into(),
            lr: LrPreset::desk(),
            lr_min_ratio: 0.01,
            epochs: 30,
            batch_size: 4,
            seed: 0,
            augment: AugmentConfig::default(),
            split: (0.8, 0.1, 0.1),
            spacing_mm: 1.0,
            slice_thickness_mm: 10.0,
            phantom: PhantomConfig::default(),
        }
    }

    /// The training-protocol numbers: 224² input, batch 16, single lr 1e-4.
    pub fn paper_s34() -> Self {
        let mut c = Self::desk();
        c.preset = "paper-s34".into();
        c.model.encoder.input_size = 224;
        c.model.encoder.patch_size = 16;
        c.batch_size = 16;
        c.optimizer = "paper-s34".into();
        c.lr = LrPreset::paper_s34();
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-s34" => Ok(Self::paper_s34()),
            _ => Err(Error::Config(format!("unknown preset `{name}`; expected desk or paper-s34"))),
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        match key {
            "preset" => *self = Self::preset(v)?,
            "seed" => self.seed = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "input_size" => m.encoder.input_size = parse(key, v)?,
            "patch_size" => m.encoder.patch_size = parse(key, v)?,
            "embed_dim" => {
                m.encoder.embed_dim = parse(key, v)?;
                m.csam.channels = m.encoder.embed_dim;
                m.csam.key_dim = m.encoder.embed_dim;
            }
            "depth" => m.encoder.depth = parse(key, v)?,
            "heads" => m.encoder.heads = parse(key, v)?,
            "mlp_ratio" => m.encoder.mlp_ratio = parse(key, v)?,
            "encoder_seed" => m.encoder.seed = parse(key, v)?,
            "freeze_backbone" => m.freeze_backbone = parse_bool(key, v)?,
            "csam" => m.use_csam = parse_bool(key, v)?,
            "structures" => m.csam.structures = parse(key, v)?,
            "key_dim" => m.csam.key_dim = parse(key, v)?,
            "csam_heads" => m.csam.heads = parse(key, v)?,
            "width_multiplier" => m.decoder.width_multiplier = parse(key, v)?,
            "reduction" => m.decoder.reduction = parse(key, v)?,
            "fused_scale" => m.decoder.fused_scale = parse(key, v)?,
            "brm_width" => m.decoder.brm_width = if v == "auto" { None } else { Some(parse(key, v)?) },
            "stage_attention" => m.decoder.attention = parse_bool(key, v)?,
            "multi_scale" => m.decoder.multi_scale = parse_bool(key, v)?,
            "brm" => m.decoder.brm = parse_bool(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "gamma" => self.loss.gamma = parse(key, v)?,
            "lambda" => self.loss.lambda = parse(key, v)?,
            "focal_gamma" => self.loss.focal_gamma = parse(key, v)?,
            "theta" => self.loss.theta = parse(key, v)?,
            "dice_eps" => self.loss.dice_eps = parse(key, v)?,
            "boundary_sides" => {
                self.loss.sides = match v {
                    "both" => BoundarySides::Both,
                    "inner" => BoundarySides::Inner,
                    _ => return Err(Error::Config(format!("`{key}` expects both or inner, got `{v}`"))),
                }
            }
            "optimizer" => {
                self.lr = LrPreset::by_name(v)?;
                self.optimizer = v.to_string();
            }
            "lr_backbone" => self.lr.backbone_lr = parse(key, v)?,
            "lr_decoder" => self.lr.decoder_lr = parse(key, v)?,
            "weight_decay" => self.lr.weight_decay = parse(key, v)?,
            "lr_min_ratio" => self.lr_min_ratio = parse(key, v)?,
            "augment_rotation" => self.augment.max_rotation_deg = parse(key, v)?,
            "augment_scale_min" => self.augment.scale.0 = parse(key, v)?,
            "augment_scale_max" => self.augment.scale.1 = parse(key, v)?,
            "augment_elastic" => self.augment.elastic_alpha = parse(key, v)?,
            "split" => {
                let parts: Vec<f64> = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<_>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(Error::Config(format!("`split` expects three fractions, got `{v}`")));
                };
                self.split = (a, b, c);
            }
            "spacing_mm" => self.spacing_mm = parse(key, v)?,
            "slice_thickness_mm" => self.slice_thickness_mm = parse(key, v)?,
            "phantom_size" => self.phantom.size = parse(key, v)?,
            "phantom_slices" => self.phantom.slices = parse(key, v)?,
            "phantom_noise" => self.phantom.noise_std = parse(key, v)?,
            "systolic_factor" => self.phantom.systolic_factor = parse(key, v)?,
            _ => return Err(Error::UnknownKey { key: key.to_string(), valid: KEYS.join(", ") }),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let m = &self.model;
        Ok(match key {
            "preset" => self.preset.clone(),
            "seed" => self.seed.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "input_size" => m.encoder.input_size.to_string(),
            "patch_size" => m.encoder.patch_size.to_string(),
            "embed_dim" => m.encoder.embed_dim.to_string(),
            "depth" => m.encoder.depth.to_string(),
            "heads" => m.encoder.heads.to_string(),
            "mlp_ratio" => m.encoder.mlp_ratio.to_string(),
            "encoder_seed" => m.encoder.seed.to_string(),
            "freeze_backbone" => m.freeze_backbone.to_string(),
            "csam" => m.use_csam.to_string(),
            "structures" => m.csam.structures.to_string(),
            "key_dim" => m.csam.key_dim.to_string(),
            "csam_heads" => m.csam.heads.to_string(),
            "width_multiplier" => m.decoder.width_multiplier.to_string(),
            "reduction" => m.decoder.reduction.to_string(),
            "fused_scale" => m.decoder.fused_scale.to_string(),
            "brm_width" => m.decoder.brm_width.map_or("auto".into(), |w| w.to_string()),
            "stage_attention" => m.decoder.attention.to_string(),
            "multi_scale" => m.decoder.multi_scale.to_string(),
            "brm" => m.decoder.brm.to_string(),
            "alpha" => self.loss.alpha.to_string(),
            "beta" => self.loss.beta.to_string(),
            "gamma" => self.loss.gamma.to_string(),
            "lambda" => self.loss.lambda.to_string(),
            "focal_gamma" => self.loss.focal_gamma.to_string(),
            "theta" => self.loss.theta.to_string(),
            "dice_eps" => self.loss.dice_eps.to_string(),
            "boundary_sides" => match self.loss.sides {
                BoundarySides::Both => "both".into(),
                BoundarySides::Inner => "inner".into(),
            },
            "optimizer" => self.optimizer.clone(),
            "lr_backbone" => self.lr.backbone_lr.to_string(),
            "lr_decoder" => self.lr.decoder_lr.to_string(),
            "weight_decay" => self.lr.weight_decay.to_string(),
            "lr_min_ratio" => self.lr_min_ratio.to_string(),
            "augment_rotation" => self.augment.max_rotation_deg.to_string(),
            "augment_scale_min" => self.augment.scale.0.to_string(),
            "augment_scale_max" => self.augment.scale.1.to_string(),
            "augment_elastic" => self.augment.elastic_alpha.to_string(),
            "split" => format!("{},{},{}", self.split.0, self.split.1, self.split.2),
            "spacing_mm" => self.spacing_mm.to_string(),
            "slice_thickness_mm" => self.slice_thickness_mm.to_string(),
            "phantom_size" => self.phantom.size.to_string(),
            "phantom_slices" => self.phantom.slices.to_string(),
            "phantom_noise" => self.phantom.noise_std.to_string(),
            "systolic_factor" => self.phantom.systolic_factor.to_string(),
            _ => return Err(Error::UnknownKey { key: key.to_string(), valid: KEYS.join(", ") }),
        })
    }

    fn parse_lines(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{raw}`", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// Parse a config, then apply `overrides` in order.
    pub fn from_text(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = Self::parse_lines(text)?;
        pairs.extend(overrides.iter().cloned());
        let mut cfg = match pairs.iter().rev().find(|(k, _)| k == "preset") {
            Some((_, p)) => Self::preset(p)?,
            None => Self::desk(),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, overrides)
    }

    /// Every key in documented order; parsing it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("documented key"));
        }
        out
    }

    pub fn hash(&self) -> u32 {
        crc32fast::hash(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.phantom.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr.decoder_lr > 0.0 && self.lr.backbone_lr >= 0.0 && self.lr.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates must be positive and weight decay non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_min_ratio) {
            return Err(Error::Config("lr_min_ratio must be in [0,1]".into()));
        }
        if !(self.spacing_mm > 0.0 && self.slice_thickness_mm > 0.0) {
            return Err(Error::Config("spacing and slice thickness must be positive".into()));
        }
        if self.augment.scale.0 <= 0.0 || self.augment.scale.0 > self.augment.scale.1 {
            return Err(Error::Config("augment scale range invalid".into()));
        }
        Ok(())
    }

    pub fn voxel_mm3(&self) -> f64 {
        self.spacing_mm * self.spacing_mm * self.slice_thickness_mm
    }
}

/// Split `key=value` override strings.
pub fn parse_overrides(items: &[String]) -> Result<Vec<(String, String)>> {
    items
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))
        })
        .collect()
}
