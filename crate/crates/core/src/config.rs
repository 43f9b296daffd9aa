//! Experiment configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::{DetectConfig, SttConfig};
use crate::error::{Error, Result};
use crate::lsm::{LsmConfig, RegionMode};
use crate::model::{InitConfig, ModelDims};
use crate::regions::{BOX_REGION_CAP, OBJECTNESS_THRESHOLD};
use crate::synthworld::{Dataset, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub fusion_layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub init: InitConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            fusion_layers: 6,
            heads: 8,
            ffn_hidden: 128,
            init: InitConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegionConfig {
    pub mode: RegionMode,
    pub box_threshold: f64,
    pub box_cap: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            mode: RegionMode::Both,
            box_threshold: OBJECTNESS_THRESHOLD,
            box_cap: BOX_REGION_CAP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for model initialization, batching and masking.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub regions: RegionConfig,
    pub lsm: LsmConfig,
    pub stt: SttConfig,
    pub detect: DetectConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: None,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            regions: RegionConfig::default(),
            lsm: LsmConfig::default(),
            stt: SttConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// A reduced model and schedule that runs the whole pipeline in well
    /// under a minute on one core.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.model.embed_dim = 32;
        cfg.model.fusion_layers = 2;
        cfg.model.heads = 2;
        cfg.model.ffn_hidden = 64;
        cfg.model.init.embedding_std = 0.18;
        cfg.lsm.batch_size = 8;
        cfg.stt.steps = 1000;
        cfg.stt.schedule.base = 0.05;
        cfg.stt.schedule.decay_steps = Vec::new();
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            let field = msg
                .split('`')
                .nth(1)
                .filter(|_| msg.starts_with("unknown field"))
                .unwrap_or("config")
                .to_string();
            Error::invalid_config(field, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::invalid_config("config", format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        let m = &self.model;
        for (field, v) in [
            ("model.embed_dim", m.embed_dim),
            ("model.heads", m.heads),
            ("model.ffn_hidden", m.ffn_hidden),
        ] {
            if v == 0 {
                return Err(Error::invalid_config(field, "must be at least 1"));
            }
        }
        if !m.embed_dim.is_multiple_of(m.heads) {
            return Err(Error::invalid_config(
                "model.heads",
                format!(
                    "embed_dim {} is not divisible by {} heads",
                    m.embed_dim, m.heads
                ),
            ));
        }
        if !(m.init.embedding_std > 0.0 && m.init.embedding_std.is_finite()) {
            return Err(Error::invalid_config(
                "model.init.embedding_std",
                "must be positive",
            ));
        }
        if self.regions.box_cap == 0 {
            return Err(Error::invalid_config(
                "regions.box_cap",
                "must be at least 1",
            ));
        }
        if !(0.0..=1.0).contains(&self.regions.box_threshold) {
            return Err(Error::invalid_config(
                "regions.box_threshold",
                "must lie in [0, 1]",
            ));
        }
        self.lsm.validate()?;
        self.stt.validate()?;
        self.detect.validate()
    }

    /// Model dimensions for a dataset: feature size, vocabulary and caption
    /// length come from the data.
    pub fn model_dims(&self, dataset: &Dataset) -> ModelDims {
        ModelDims {
            feature_dim: dataset.config.feature_dim,
            embed_dim: self.model.embed_dim,
            vocab_size: dataset.vocabulary.len(),
            fusion_layers: self.model.fusion_layers,
            heads: self.model.heads,
            ffn_hidden: self.model.ffn_hidden,
            max_caption_len: dataset.config.caption_len_max,
        }
    }
}
