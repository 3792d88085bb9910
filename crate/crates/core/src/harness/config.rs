//! Run configuration, stored as TOML.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::EcaConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ScaleSpec};
use crate::ssm::Discretization;

pub const CONFIG_VERSION: u32 = 1;

/// Every field is optional in the file; missing ones take the defaults
/// below. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// `N`, `S`, `M`, or the test-only `T`.
    pub scale: String,
    pub num_classes: usize,
    pub input_size: usize,
    pub seed: u64,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Gradient norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub conf_threshold: f64,
    pub max_dets: usize,
    /// Derive ECA strip ratio and kernel from channel counts.
    pub adaptive_eca: bool,
    pub discretization: Discretization,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            scale: "N".into(),
            num_classes: 3,
            input_size: 640,
            seed: 0,
            lr_initial: 0.01,
            lr_final: 0.0001,
            momentum: 0.937,
            weight_decay: 0.0,
            warmup_epochs: 3,
            batch_size: 8,
            epochs: 50,
            grad_clip: 10.0,
            conf_threshold: 0.25,
            max_dets: 100,
            adaptive_eca: false,
            discretization: Discretization::Taylor,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.version != CONFIG_VERSION {
            return fail(format!("unsupported config version {}", self.version));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return fail(format!(
                "input_size={} must be a positive multiple of 32 (divisible by 32)",
                self.input_size
            ));
        }
        if !(self.lr_final < self.lr_initial) || self.lr_final < 0.0 {
            return fail(format!(
                "need 0 <= lr_final < lr_initial, got {} and {}",
                self.lr_final, self.lr_initial
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum={} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.conf_threshold) {
            return fail(format!(
                "conf_threshold={} outside [0, 1]",
                self.conf_threshold
            ));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return fail("weight_decay and grad_clip must be non-negative".into());
        }
        self.model_config()?.scale.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let scale = ScaleSpec::from_name(&self.scale, self.num_classes)?;
        let mut cfg = ModelConfig::new(scale).with_discretization(self.discretization);
        cfg.eca = EcaConfig {
            adaptive: self.adaptive_eca,
            ..EcaConfig::default()
        };
        Ok(cfg)
    }

    /// Scheduled rate at `epoch`: cosine from `lr_initial` at epoch 0 to
    /// `lr_final` at the last epoch.
    pub fn scheduled_lr(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_initial;
        }
        let t = (epoch.min(self.epochs - 1)) as f64 / (self.epochs - 1) as f64;
        self.lr_final + (self.lr_initial - self.lr_final) * 0.5 * (1.0 + (PI * t).cos())
    }

    /// Rate for global iteration `iter` inside `epoch`: the scheduled rate,
    /// ramped linearly from 0 over the first `warmup_epochs` epochs.
    pub fn lr_at(&self, epoch: usize, iter: usize, iters_per_epoch: usize) -> f64 {
        let lr = self.scheduled_lr(epoch);
        let warm = self.warmup_epochs * iters_per_epoch;
        if iter < warm {
            lr * iter as f64 / warm as f64
        } else {
            lr
        }
    }
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

pub fn config_to_string(cfg: &RunConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn save_config(cfg: &RunConfig, path: &Path) -> Result<()> {
    fs::write(path, config_to_string(cfg)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_bad_input_size() {
        let err = parse_config("input_size = 641").unwrap_err().to_string();
        assert!(err.contains("divisible by 32"), "{err}");
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(parse_config("learning_rate = 0.1").is_err());
    }

    #[test]
    fn roundtrip() {
        let cfg = RunConfig {
            scale: "T".into(),
            input_size: 160,
            discretization: Discretization::Zoh,
            ..RunConfig::default()
        };
        assert_eq!(parse_config(&config_to_string(&cfg).unwrap()).unwrap(), cfg);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.scheduled_lr(0), 0.01);
        assert!((cfg.scheduled_lr(cfg.epochs - 1) - 0.0001).abs() < 1e-15);
        let ipe = 4;
        assert_eq!(cfg.lr_at(0, 0, ipe), 0.0);
        let warm = cfg.warmup_epochs * ipe;
        let mut prev = f64::INFINITY;
        for it in warm..cfg.epochs * ipe {
            let lr = cfg.lr_at(it / ipe, it, ipe);
            assert!(lr <= prev);
            prev = lr;
        }
        for it in 1..warm {
            assert!(cfg.lr_at(it / ipe, it, ipe) > cfg.lr_at((it - 1) / ipe, it - 1, ipe));
        }
    }
}
