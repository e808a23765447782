//! Top-level experiment configuration and data preparation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{build_base_split, Dataset};
use crate::error::{LabError, Result};
use crate::model::ModelConfig;
use crate::pseudo_query::{build_augmented_dataset, AugmentConfig, Margins};
use crate::seeds;
use crate::trainer::{FreshReal, TrainConfig, TrainData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub margins: Margins,
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_size: 2000,
            test_size: 1000,
            margins: Margins::default(),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Seed for every dataset; training seeds live in `train.seeds`.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.augment.noise.validate()?;
        if self.data.train_size == 0 || self.data.test_size == 0 {
            return Err(LabError::Config("train_size and test_size must be positive".into()));
        }
        let (lo, hi) = self.data.augment.count_range;
        if lo < 3 || hi > 10 || lo > hi {
            return Err(LabError::Config(format!(
                "count_range ({lo}, {hi}) must lie within 3..=10"
            )));
        }
        Ok(())
    }

    /// Reads a JSON config; missing fields take their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn build_train_split(cfg: &ExperimentConfig) -> Result<Dataset> {
    build_base_split(cfg.data.train_size, seeds::stream::TRAIN, cfg.seed, cfg.data.margins)
}

pub fn build_test_split(cfg: &ExperimentConfig) -> Result<Dataset> {
    build_base_split(cfg.data.test_size, seeds::stream::TEST, cfg.seed, cfg.data.margins)
}

pub fn build_augmented(cfg: &ExperimentConfig) -> Result<Dataset> {
    Ok(build_augmented_dataset(&cfg.data.augment, cfg.seed)?.into())
}

/// Train data (real plus augmented pool) and the held-out test split.
pub fn build_all(cfg: &ExperimentConfig) -> Result<(TrainData, Dataset)> {
    Ok((
        TrainData {
            real: build_train_split(cfg)?,
            augmented: build_augmented(cfg)?,
            fresh: Some(FreshReal {
                seed: cfg.seed,
                margins: cfg.data.margins,
            }),
        },
        build_test_split(cfg)?,
    ))
}
