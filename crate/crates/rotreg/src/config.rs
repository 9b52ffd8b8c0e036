//! Experiment configuration: one JSON file drives data generation, both
//! training phases, evaluation and the filter diagnostics. Unknown keys are
//! rejected; defaults follow the published hyperparameters where they exist
//! and the documented desk-scale choices elsewhere.

use crate::augment::AugConfig;
use crate::data::DataConfig;
use crate::ssl::{FilterKind, FilterPolicy};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1_iters: u64,
    pub phase2_iters: u64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub ema_decay: f64,
    pub val_interval: u64,
    pub log_interval: u64,
    /// Use the strong pipeline for labeled batches in phase 2.
    pub labeled_strong_aug: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_iters: 1500,
            phase2_iters: 1500,
            lr_phase1: 1e-3,
            lr_phase2: 1e-4,
            batch_labeled: 8,
            batch_unlabeled: 32,
            ema_decay: 0.999,
            val_interval: 200,
            log_interval: 50,
            labeled_strong_aug: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dataset directory; `gen-data` writes here, the other commands read.
    pub data_dir: PathBuf,
    pub data: DataConfig,
    pub aug: AugConfig,
    pub train: TrainConfig,
    pub filter: FilterPolicy,
    /// Checkpoint produced by phase 1 / consumed by phase 2.
    pub phase1_checkpoint: Option<PathBuf>,
    /// Checkpoint evaluated by `eval` / `filter-stats` (defaults to the
    /// phase-2 output under out_dir).
    pub eval_checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            out_dir: PathBuf::from("out"),
            data_dir: PathBuf::from("out/dataset"),
            data: DataConfig::default(),
            aug: AugConfig::default(),
            train: TrainConfig::default(),
            filter: FilterPolicy::default(),
            phase1_checkpoint: None,
            eval_checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if t.lr_phase1 <= 0.0 || t.lr_phase2 <= 0.0 {
            return Err(ConfigError::Invalid("learning rates must be positive".into()));
        }
        if t.batch_labeled == 0 || t.batch_unlabeled == 0 {
            return Err(ConfigError::Invalid("batch sizes must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&t.ema_decay) {
            return Err(ConfigError::Invalid(format!(
                "ema_decay must be in [0, 1], got {}",
                t.ema_decay
            )));
        }
        if t.val_interval == 0 || t.log_interval == 0 {
            return Err(ConfigError::Invalid("val/log intervals must be >= 1".into()));
        }
        self.data.validate().map_err(ConfigError::Invalid)?;
        self.aug.validate().map_err(ConfigError::Invalid)?;
        self.filter.validate().map_err(ConfigError::Invalid)?;
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Path of the phase-1 checkpoint (explicit or the default layout).
    pub fn phase1_ckpt_path(&self) -> PathBuf {
        self.phase1_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("phase1.ckpt"))
    }

    pub fn final_ckpt_path(&self) -> PathBuf {
        self.out_dir.join("final.ckpt")
    }

    pub fn eval_ckpt_path(&self) -> PathBuf {
        self.eval_checkpoint
            .clone()
            .unwrap_or_else(|| self.final_ckpt_path())
    }

    /// Convenience for tests: defaults with dynamic-entropy filtering.
    pub fn desk_default() -> Self {
        ExperimentConfig {
            filter: FilterPolicy {
                kind: FilterKind::DynamicEntropy,
                ..FilterPolicy::default()
            },
            ..ExperimentConfig::default()
        }
    }
}
