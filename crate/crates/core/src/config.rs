//! Run configuration and the flat `key = value` config-file format.
//!
//! Unknown keys are hard errors so typos never silently fall back to
//! defaults. `#` starts a comment; blank lines are ignored.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::norm::NormMode;
use crate::optim::AdamConfig;
use crate::similarity::SimMode;
use crate::threshold::ThresholdConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value {value:?} for {key}: {msg}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        msg: String,
    },
    #[error("line {line}: expected `key = value`")]
    Malformed { line: usize },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Everything a training run needs. Paths may stay unset when the caller
/// passes them explicitly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub train_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub threshold: ThresholdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: None,
            train_frac: 0.40,
            batch_size: 512,
            epochs: 200,
            seed: 0,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            threshold: ThresholdConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "train_frac {} outside (0, 1)",
                self.train_frac
            )));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be >= 1".into()));
        }
        self.model.validate().map_err(ConfigError::Invalid)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |msg: &str| ConfigError::BadValue {
            line,
            key: key.to_string(),
            value: value.to_string(),
            msg: msg.to_string(),
        };
        macro_rules! parse {
            ($ty:ty) => {
                value.parse::<$ty>().map_err(|e| bad(&e.to_string()))?
            };
        }
        match key {
            "dataset" => self.dataset = Some(PathBuf::from(value)),
            "output_dir" => self.output_dir = Some(PathBuf::from(value)),
            "train_frac" => self.train_frac = parse!(f64),
            "batch_size" => self.batch_size = parse!(usize),
            "epochs" => self.epochs = parse!(usize),
            "seed" => self.seed = parse!(u64),
            "layers" => self.model.num_layers = parse!(usize),
            "hidden_dim" => self.model.hidden_dim = parse!(usize),
            "sim_embed_dim" => self.model.sim_embed_dim = parse!(usize),
            "iis_start" => self.model.iis_start_layer = parse!(usize),
            "lambda_sim" => self.model.lambda_sim = parse!(f64),
            "similarity" => {
                self.model.sim_mode = match value {
                    "l1" => SimMode::L1,
                    "cosine" => SimMode::Cosine,
                    _ => return Err(bad("expected l1 or cosine")),
                }
            }
            "norm" => {
                self.model.norm.mode = match value {
                    "none" => NormMode::None,
                    "node" => NormMode::NodeWise,
                    "batch" => NormMode::BatchWise,
                    _ => return Err(bad("expected none, node, or batch")),
                }
            }
            "norm_eps" => self.model.norm.eps = parse!(f64),
            "norm_momentum" => self.model.norm.momentum = parse!(f64),
            "lr" => self.adam.lr = parse!(f64),
            "beta1" => self.adam.beta1 = parse!(f64),
            "beta2" => self.adam.beta2 = parse!(f64),
            "adam_eps" => self.adam.eps = parse!(f64),
            "threshold_step" => self.threshold.step = parse!(f64),
            "threshold_window" => self.threshold.window = parse!(usize),
            "threshold_freeze_at" => self.threshold.freeze_at = parse!(i32),
            "threshold_initial" => self.threshold.initial = parse!(f64),
            _ => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Parse a config file's text on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Malformed { line });
            };
            self.set(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_flat_key_values() {
        let mut cfg = RunConfig::default();
        cfg.apply_text(
            "# comment\nseed = 7\nsimilarity = l1\nnorm = batch\nbatch_size = 256\nlr = 0.005\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.sim_mode, SimMode::L1);
        assert_eq!(cfg.model.norm.mode, NormMode::BatchWise);
        assert_eq!(cfg.batch_size, 256);
        assert_eq!(cfg.adam.lr, 0.005);
    }

    #[test]
    fn unknown_keys_are_hard_errors() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("batch_sise = 256\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn bad_values_report_the_key() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("epochs = many\n").unwrap_err();
        assert!(err.to_string().contains("epochs"));
    }

    #[test]
    fn validation_rejects_out_of_range_fraction() {
        let cfg = RunConfig {
            train_frac: 1.5,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
