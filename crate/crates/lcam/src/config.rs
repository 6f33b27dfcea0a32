//! Layered run configuration.
//!
//! A training run draws its hyper-parameters from up to three layers,
//! weakest first: a named preset (or the built-in default), a TOML config
//! file, and explicit CLI flags. The two stronger layers are *partial* —
//! they only name the fields they want to change — and are represented by
//! [`TrainOverlay`]. [`resolve_train_config`] stacks the layers and
//! validates the result, so every entry point shares one precedence rule:
//! CLI flag > config file > preset.

use std::path::Path;

use serde::Deserialize;

use crate::backbone::SplitPoint;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::training::{TrainConfig, Variant};

/// Partial loss weights: only the named coefficients are replaced.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossOverlay {
    /// Replacement for the smoothness coefficient λ1.
    pub lambda_tv: Option<f64>,
    /// Replacement for the area coefficient λ2.
    pub lambda_av: Option<f64>,
    /// Replacement for the classification coefficient λ3.
    pub lambda_ce: Option<f64>,
    /// Replacement for the area exponent λ4.
    pub av_exponent: Option<f64>,
}

impl LossOverlay {
    /// Returns `base` with the named coefficients replaced.
    pub fn apply(&self, base: LossWeights) -> LossWeights {
        LossWeights {
            lambda_tv: self.lambda_tv.unwrap_or(base.lambda_tv),
            lambda_av: self.lambda_av.unwrap_or(base.lambda_av),
            lambda_ce: self.lambda_ce.unwrap_or(base.lambda_ce),
            av_exponent: self.av_exponent.unwrap_or(base.av_exponent),
        }
    }
}

/// A partial [`TrainConfig`]: every field is optional, and applying the
/// overlay replaces exactly the fields that are present.
///
/// The TOML form mirrors the config field names, with the loss weights in
/// an optional `[loss_weights]` table:
///
/// ```toml
/// variant = "img"
/// epochs = 7
///
/// [loss_weights]
/// lambda_tv = 0.01
/// ```
///
/// Unknown keys are rejected so a typo cannot silently fall through to a
/// weaker layer.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverlay {
    /// Replacement masking regime (`"fm"` or `"img"`).
    pub variant: Option<Variant>,
    /// Replacement images-per-step count.
    pub batch_size: Option<usize>,
    /// Replacement initial learning rate.
    pub lr: Option<f64>,
    /// Replacement per-epoch learning-rate multiplier.
    pub lr_decay_per_epoch: Option<f64>,
    /// Replacement epoch count.
    pub epochs: Option<usize>,
    /// Replacements for individual loss coefficients.
    #[serde(default)]
    pub loss_weights: LossOverlay,
    /// Replacement seed.
    pub seed: Option<u64>,
    /// Replacement split point (`"last_conv"` or `"after_last_maxpool"`).
    pub split_point: Option<SplitPoint>,
}

impl TrainOverlay {
    /// Parses an overlay from TOML text.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig {
            detail: format!("config text: {e}"),
        })
    }

    /// Reads and parses an overlay from a TOML file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::FileFormat {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Returns `base` with the overlay's named fields replaced.
    pub fn apply(&self, base: TrainConfig) -> TrainConfig {
        TrainConfig {
            variant: self.variant.unwrap_or(base.variant),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            lr: self.lr.unwrap_or(base.lr),
            lr_decay_per_epoch: self.lr_decay_per_epoch.unwrap_or(base.lr_decay_per_epoch),
            epochs: self.epochs.unwrap_or(base.epochs),
            loss_weights: self.loss_weights.apply(base.loss_weights),
            seed: self.seed.unwrap_or(base.seed),
            split_point: self.split_point.unwrap_or(base.split_point),
        }
    }
}

/// Stacks the three configuration layers and validates the result.
///
/// The base is `preset` when given (otherwise the default config); the
/// file at `config_file`, when given, overrides the base; `cli` overrides
/// both.
pub fn resolve_train_config(
    preset: Option<&str>,
    config_file: Option<&Path>,
    cli: &TrainOverlay,
) -> Result<TrainConfig> {
    let base = match preset {
        Some(name) => TrainConfig::preset(name)?,
        None => TrainConfig::default(),
    };
    let with_file = match config_file {
        Some(path) => TrainOverlay::from_file(path)?.apply(base),
        None => base,
    };
    let cfg = cli.apply(with_file);
    cfg.validate()?;
    Ok(cfg)
}
