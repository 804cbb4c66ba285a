//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{DataConfig, Vocab, BOX_DIM};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Architecture choices; vocabulary, answer, object and RoI sizes come from
/// the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub hidden: usize,
    pub heads: usize,
    pub lang_layers: usize,
    pub image_layers: usize,
    pub cross_layers: usize,
    /// Maximum question length including `[CLS]`.
    pub max_len: usize,
    pub mlp_hidden: usize,
    pub init_std: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            hidden: 32,
            heads: 4,
            lang_layers: 2,
            image_layers: 1,
            cross_layers: 2,
            max_len: 16,
            mlp_hidden: 64,
            init_std: 0.2,
        }
    }
}

impl ArchConfig {
    pub fn model_config(&self, vocab: &Vocab, objects: usize, roi_dim: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            heads: self.heads,
            lang_layers: self.lang_layers,
            image_layers: self.image_layers,
            cross_layers: self.cross_layers,
            vocab_size: vocab.len(),
            answer_count: vocab.answer_count(),
            objects,
            roi_dim,
            box_dim: BOX_DIM,
            max_len: self.max_len,
            mlp_hidden: self.mlp_hidden,
            init_std: self.init_std,
        }
    }
}

/// Sections `model`, `train`, `distill` and `data`; missing sections and
/// fields take their defaults, unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<RunConfig> {
        let c: RunConfig = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&s).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::shapes_world(self.data.objects)
    }

    /// Model configuration for data generated from `self.data`.
    pub fn model_config(&self) -> ModelConfig {
        self.model
            .model_config(&self.vocab(), self.data.objects, self.data.roi_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let m = self.model_config();
        m.validate()?;
        self.train.validate(&m)?;
        self.distill.validate(&m)
    }
}
