//! Training hyperparameters and their serialized form.

use crate::error::{Error, Result};
use crate::model::FusionMode;
use crate::numerics::Precision;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Defaults: one bag per optimizer step, weight decay 0.01, no gradient
/// clipping, no scheduler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: FusionMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub folds: usize,
    pub n_bin: usize,
    pub d_hid: usize,
    pub d_att: usize,
    pub attn_bias: bool,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: FusionMode::Fluoroformer,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            epochs: 25,
            folds: 5,
            n_bin: 4,
            d_hid: 256,
            d_att: 256,
            attn_bias: true,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        if self.folds < 3 {
            return Err(Error::config(format!(
                "folds must be >= 3 (train/val/test need distinct groups), got {}",
                self.folds
            )));
        }
        if self.n_bin < 2 {
            return Err(Error::config("n_bin must be >= 2"));
        }
        if self.d_hid == 0 || self.d_att == 0 {
            return Err(Error::config("d_hid and d_att must be >= 1"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("adam_eps must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
