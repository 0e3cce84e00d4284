//! Run configuration: a TOML document with full schema validation. Unknown
//! keys are rejected; CLI flags override individual values after parsing.

use crate::augment::AugmentConfig;
use crate::encoder::SyntheticEncoderParams;
use crate::error::{Error, Result};
use crate::eval::Bandwidth;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Sizing of the generated synthetic benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Styles available to training (mixing basis and dictionary).
    pub train_styles: usize,
    /// Extra styles that appear only in the evaluation image tables.
    pub heldout_styles: usize,
    /// Word-vector dimension W.
    pub word_dim: usize,
    /// Image instances per (class, style) cell.
    pub images_per_class_style: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            train_styles: 4,
            heldout_styles: 2,
            word_dim: 16,
            images_per_class_style: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mmd_bandwidth: Bandwidth,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mmd_bandwidth: Bandwidth::Median,
        }
    }
}

/// The full run configuration consumed by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub synthetic: SyntheticEncoderParams,
    pub benchmark: BenchmarkConfig,
    pub aug: AugmentConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn parse_str(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.aug.validate()?;
        if self.benchmark.train_styles == 0 {
            return Err(Error::Config("benchmark.train_styles must be >= 1".into()));
        }
        if self.benchmark.word_dim == 0 {
            return Err(Error::Config("benchmark.word_dim must be >= 1".into()));
        }
        if self.benchmark.images_per_class_style == 0 {
            return Err(Error::Config(
                "benchmark.images_per_class_style must be >= 1".into(),
            ));
        }
        self.train.validate(self.benchmark.train_styles)?;
        if let Bandwidth::Fixed(s) = self.eval.mmd_bandwidth {
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::Config(format!(
                    "eval.mmd_bandwidth {s} must be > 0"
                )));
            }
        }
        Ok(())
    }

    /// The effective master seed: explicit config value or the train seed.
    pub fn master_seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    /// Training configuration with the augmentation section and master seed
    /// folded in.
    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.aug = self.aug.clone();
        cfg.seed = self.master_seed();
        cfg
    }
}

/// The default synthetic-benchmark configuration: the dictionary covers all
/// four training styles.
pub fn default_run_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.dictionary_size = 4;
    cfg
}
