//! Experiment configuration schema (JSON, versioned, strict fields).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::coating::{CoatTrainOptions, CoatingObjectiveConfig, ExtConfig, GenConfig};
use crate::diffusion::DiffusionConfig;
use crate::error::{Error, Result};
use crate::pipeline::dataset::SynthSpec;

pub const CONFIG_VERSION: u32 = 1;

/// Where the protected dataset comes from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic(SynthSpec),
    Folder { path: String },
}

/// Which model estimates the benign score distribution.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum BenignModelKind {
    /// the toy base model fine-tuned on the uncoated dataset (default)
    FineTunedUncoated,
    /// the untrained base initialization
    Base,
}

/// Meta-training section.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MetaSection {
    pub proxy: SynthSpec,
    pub iterations: usize,
    pub batch_size: usize,
    pub inner_steps: usize,
    pub gamma: f64,
    pub xi: f64,
    /// adaptation step budget when initializing coating training from meta
    pub adapt_steps: usize,
}

/// Optional attack stages appended to a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum AttackStage {
    /// apply the named transforms to the mimicry pool and re-verify
    Transforms { specs: Vec<crate::attacks::TransformSpec> },
    /// augment the coated training set before personalization and re-run
    TrainTimeAugment { mode: crate::attacks::AugmentMode },
    /// loss-based filtering + unlearning on the personalized model
    LossFilterUnlearn { filter_rate: f64, unlearn_steps: usize },
    /// regeneration purification of the mimicries at the given noise steps
    SelfPurify { noise_steps: Vec<usize>, pool: usize },
    /// train an uncoat mapping on an auxiliary coated corpus
    UncoatMapping { aux_family: u64, epochs: usize },
}

/// Full experiment configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub dataset: DatasetSource,
    pub diffusion: DiffusionConfig,
    pub generator: GenConfig,
    pub extractor: ExtConfig,
    pub coating: CoatingObjectiveConfig,
    pub coat_train: CoatTrainOptions,
    /// passes over the uncoated dataset for the surrogate
    pub surrogate_epochs: usize,
    /// passes over the (partially) coated dataset for the infringer model
    pub personalize_epochs: usize,
    pub train_lr: f64,
    pub train_batch: usize,
    /// fraction of the dataset that gets coated
    pub coating_ratio: f64,
    pub mimicry_pool: usize,
    pub benign_pool: usize,
    pub verify_n: usize,
    pub verify_m: usize,
    pub trials: usize,
    pub alpha_grid: Vec<f64>,
    pub benign_model: BenignModelKind,
    /// also train an independently seeded clean model and report its TPR
    pub negative_control: bool,
    pub meta: Option<MetaSection>,
    pub attacks: Vec<AttackStage>,
    /// Monte-Carlo draws for the reported feature-relevance numbers
    pub tau_mc_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            format_version: CONFIG_VERSION,
            dataset: DatasetSource::Synthetic(SynthSpec::default()),
            diffusion: DiffusionConfig::default(),
            generator: GenConfig::default(),
            extractor: ExtConfig::default(),
            coating: CoatingObjectiveConfig::default(),
            coat_train: CoatTrainOptions::default(),
            surrogate_epochs: 30,
            personalize_epochs: 240,
            train_lr: 0.02,
            train_batch: 16,
            coating_ratio: 1.0,
            mimicry_pool: 1000,
            benign_pool: 1000,
            verify_n: 30,
            verify_m: 30,
            trials: 10_000,
            alpha_grid: vec![1e-2, 1e-4, 1e-6, 1e-9],
            benign_model: BenignModelKind::FineTunedUncoated,
            negative_control: false,
            meta: None,
            attacks: Vec::new(),
            tau_mc_samples: 64,
        }
    }
}

impl ExperimentConfig {
    /// A small configuration that exercises the full graph in CI time.
    pub fn smoke() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::Synthetic(SynthSpec {
                classes: 2,
                count: 64,
                size: 32,
                family: 0,
            }),
            surrogate_epochs: 10,
            personalize_epochs: 40,
            coat_train: CoatTrainOptions { max_steps: 40, ..Default::default() },
            coating: CoatingObjectiveConfig { mc_samples: 1, ..Default::default() },
            mimicry_pool: 60,
            benign_pool: 60,
            trials: 400,
            tau_mc_samples: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::Format(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        if !(self.coating_ratio > 0.0 && self.coating_ratio <= 1.0) {
            return Err(Error::domain("coating_ratio must lie in (0, 1]"));
        }
        if self.verify_n == 0 || self.verify_m == 0 || self.trials == 0 {
            return Err(Error::domain("verify_n, verify_m, trials must be positive"));
        }
        if self.mimicry_pool < self.verify_n || self.benign_pool < self.verify_m {
            return Err(Error::domain("pools must be at least as large as the sample sizes"));
        }
        for &a in &self.alpha_grid {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::domain(format!("alpha {a} outside (0,1)")));
            }
        }
        if self.surrogate_epochs == 0 || self.personalize_epochs == 0 {
            return Err(Error::domain("epoch counts must be positive"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_roundtrips() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), json);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v: serde_json::Value =
            serde_json::to_value(ExperimentConfig::default()).unwrap();
        v["surprise"] = serde_json::json!(1);
        let parsed: std::result::Result<ExperimentConfig, _> = serde_json::from_value(v);
        assert!(parsed.is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.coating_ratio = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.alpha_grid = vec![2.0];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.mimicry_pool = 10;
        assert!(cfg.validate().is_err());
    }
}
