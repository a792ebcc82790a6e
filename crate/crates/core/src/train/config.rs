//! TOML run configuration. Every section is optional and defaults to the
//! published hyperparameters; unknown keys are rejected.
//!
//! ```toml
//! [network]   # NetworkSpec
//! [train]     # optimizer and schedule
//! [loss]      # boundary_weight, se_side, class_rule, kind
//! [augment]   # per-transform toggles and ranges
//! [data]      # normalization and face-crop ratios
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use super::Stage;
use crate::data::{AugmentConfig, CropRatios, Normalization};
use crate::error::{ensure, Error, Result};
use crate::loss::LossConfig;
use crate::network::NetworkSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    /// Square training resolution; divisible by 4.
    pub resolution: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Held-out share used for best-epoch selection when no validation set
    /// is given.
    pub val_fraction: f64,
    /// Validate every this many epochs (and always after the last one).
    pub val_every: usize,
    /// Cosine learning-rate decay over each stage.
    pub cosine: bool,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 60,
            weight_decay: 5e-4,
            epochs_stage1: 300,
            epochs_stage2: 300,
            resolution: 224,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_fraction: 0.1,
            val_every: 1,
            cosine: false,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Coarse => self.epochs_stage1,
            Stage::Full => self.epochs_stage2,
        }
    }

    /// Learning rate for a 0-based epoch of a stage lasting `epochs`.
    pub fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        if !self.cosine || epochs == 0 {
            return self.lr;
        }
        self.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        ensure!(self.batch_size > 0, "batch_size must be positive");
        ensure!(
            self.resolution > 0 && self.resolution % 4 == 0,
            "resolution must be a positive multiple of 4, got {}",
            self.resolution
        );
        ensure!((0.0..1.0).contains(&self.val_fraction), "val_fraction must lie in [0, 1)");
        ensure!(self.val_every > 0, "val_every must be positive");
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub normalization: Normalization,
    pub crop: CropRatios,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub data: DataConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.augment.validate()?;
        self.data.normalization.validate()?;
        self.data.crop.validate()
    }

    /// The network spec at the training resolution.
    pub fn training_spec(&self) -> NetworkSpec {
        let r = self.train.resolution;
        self.network.clone().with_input_size(r, r)
    }
}
