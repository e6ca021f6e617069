//! Run configuration: one TOML file, unknown keys rejected, cross-checked
//! on load. Every output carries the SHA-256 of the resolved config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corridor::RelevanceConfig;
use crate::losses::LossConfig;
use crate::metrics::MetricsConfig;
use crate::sparsity::training::{HeadFitConfig, RelevanceTrainConfig};
use crate::sparsity::{ModelConfig, ScheduleConfig};
use crate::synthetic::SyntheticSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    /// Synthetic dataset generation.
    pub data: u64,
    /// Random toy-model weights.
    pub model: u64,
    /// Gumbel noise in `sparse_train` routing.
    pub routing: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { data: 1, model: 3, routing: 0 }
    }
}

/// Mirror of the base training hyperparameters. Full training is out of
/// scope; only the relevance heads train, with `relevance_training`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingMirror {
    pub learning_rate: f64,
    pub lr_schedule: String,
    pub optimizer: String,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for TrainingMirror {
    fn default() -> Self {
        Self { learning_rate: 4e-4, lr_schedule: "cosine".into(), optimizer: "adamw".into(), weight_decay: 0.01, batch_size: 16, epochs: 24 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelevanceTraining {
    pub optim: RelevanceTrainConfig,
    /// Scenes held out for evaluation (the last ones).
    pub test_scenes: usize,
    pub negatives_per_frame: usize,
}

impl Default for RelevanceTraining {
    fn default() -> Self {
        Self { optim: RelevanceTrainConfig::default(), test_scenes: 8, negatives_per_frame: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurveConfig {
    pub keep_ratios: Vec<f64>,
    /// Scenes used to fit detection heads (the first ones); the rest are
    /// evaluated.
    pub train_scenes: usize,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self { keep_ratios: vec![1.0, 0.5, 0.33, 0.1], train_scenes: 3 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Total keep ratio used when `schedule` is absent.
    pub tkr: f64,
    /// Explicit schedule; derived from the model layout when absent.
    pub schedule: Option<ScheduleConfig>,
    pub relevance: RelevanceConfig,
    pub metrics: MetricsConfig,
    pub loss: LossConfig,
    pub synthetic: SyntheticSpec,
    pub head_fit: HeadFitConfig,
    pub relevance_training: RelevanceTraining,
    pub curve: CurveConfig,
    pub training: TrainingMirror,
    pub seeds: Seeds,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig { anchor_stride: 1, ..ModelConfig::default() },
            tkr: 0.5,
            schedule: None,
            relevance: RelevanceConfig::default(),
            metrics: MetricsConfig::default(),
            loss: LossConfig::default(),
            synthetic: SyntheticSpec { scenes: 4, ..SyntheticSpec::default() },
            head_fit: HeadFitConfig::default(),
            relevance_training: RelevanceTraining::default(),
            curve: CurveConfig::default(),
            training: TrainingMirror::default(),
            seeds: Seeds::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        Self::from_toml(&text)
    }

    /// Schedule at the configured keep ratio.
    pub fn schedule(&self) -> ScheduleConfig {
        self.schedule_at(self.tkr)
    }

    pub fn schedule_at(&self, tkr: f64) -> ScheduleConfig {
        match &self.schedule {
            Some(s) => s.with_tkr(tkr),
            None => ScheduleConfig::for_model(&self.model, tkr),
        }
    }

    /// Synthetic spec with the data seed applied.
    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec { seed: self.seeds.data, ..self.synthetic.clone() }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(self.tkr > 0.0 && self.tkr <= 1.0) {
            return bad(format!("tkr {} outside (0, 1]", self.tkr));
        }
        let s = self.schedule();
        s.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if s.backbone.total_layers != self.model.backbone_blocks.len() {
            return bad(format!(
                "schedule.backbone.total_layers = {} but the model has {} backbone blocks",
                s.backbone.total_layers,
                self.model.backbone_blocks.len()
            ));
        }
        if s.decoder.total_layers != self.model.decoder_layers {
            return bad(format!("schedule.decoder.total_layers = {} but model.decoder_layers = {}", s.decoder.total_layers, self.model.decoder_layers));
        }
        self.relevance.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.metrics.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.loss.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.synthetic.validate().map_err(ConfigError::Invalid)?;
        if let Some(r) = self.curve.keep_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("curve keep ratio {r} outside (0, 1]"));
        }
        if self.curve.keep_ratios.is_empty() {
            return bad("curve.keep_ratios is empty".into());
        }
        let rt = &self.relevance_training;
        if !(rt.optim.learning_rate > 0.0) || rt.optim.weight_decay < 0.0 || !(rt.optim.temperature > 0.0) {
            return bad("relevance_training needs learning_rate > 0, weight_decay >= 0, temperature > 0".into());
        }
        if !(self.head_fit.ridge_lambda >= 0.0 && self.head_fit.match_gate > 0.0) {
            return bad("head_fit needs ridge_lambda >= 0 and match_gate > 0".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths.out = None;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Stamp carried by every output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn of(cfg: &RunConfig) -> Self {
        Self { tool_version: env!("CARGO_PKG_VERSION").into(), config_hash: cfg.hash() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_toml("tkr = 0.5\nbogus = 1\n"), Err(ConfigError::Parse(_))));
        assert!(matches!(RunConfig::from_toml("[model]\nlayers = 3\n"), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn cross_validation() {
        let text = "[schedule]\ntotal_keep_ratio = 0.5\nwarmup = [0, 10]\n[schedule.backbone]\npruning_layers = [2]\ntotal_layers = 4\nreactivation_layer = 4\n[schedule.decoder]\npruning_layers = [2]\ntotal_layers = 3\nreactivation_layer = 3\n";
        assert!(matches!(RunConfig::from_toml(text), Err(ConfigError::Invalid(_))));
        assert!(matches!(RunConfig::from_toml("tkr = 0.0\n"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn hash_changes_with_content() {
        let a = RunConfig::default();
        let b = RunConfig { tkr: 0.33, ..RunConfig::default() };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        let mut c = a.clone();
        c.paths.out = Some("elsewhere".into());
        assert_eq!(a.hash(), c.hash());
    }
}
