use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by teacher and student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden size `d`.
    pub hidden: usize,
    /// Attention heads per block.
    pub heads: usize,
    /// Language-encoder layers (M).
    pub lang_layers: usize,
    /// Image-encoder layers (N).
    pub image_layers: usize,
    /// Cross-modality layers (L).
    pub cross_layers: usize,
    pub vocab_size: usize,
    pub answer_count: usize,
    /// Objects per scene (k).
    pub objects: usize,
    /// RoI feature size.
    pub roi_dim: usize,
    pub box_dim: usize,
    /// Maximum question length including `[CLS]`.
    pub max_len: usize,
    /// Width of the feed-forward sublayer.
    pub mlp_hidden: usize,
    /// Standard deviation of the truncated-normal weight initializer.
    pub init_std: f64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model: {m}")));
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad("hidden size must be a positive multiple of heads");
        }
        if self.lang_layers == 0 || self.image_layers == 0 || self.cross_layers == 0 {
            return bad("every encoder needs at least one layer");
        }
        if self.objects == 0 || self.max_len == 0 {
            return bad("objects and max_len must be at least 1");
        }
        if self.vocab_size < 2 || self.answer_count == 0 || self.roi_dim == 0 || self.box_dim == 0 {
            return bad("vocab, answers, roi and box sizes must be positive");
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }

    /// Full-scale teacher (M=9, N=5, L=5, d=768, 12 heads).
    pub fn full_scale_teacher(vocab_size: usize, answer_count: usize) -> Self {
        ModelConfig {
            hidden: 768,
            heads: 12,
            lang_layers: 9,
            image_layers: 5,
            cross_layers: 5,
            vocab_size,
            answer_count,
            objects: 36,
            roi_dim: 2048,
            box_dim: 4,
            max_len: 20,
            mlp_hidden: 3072,
            init_std: 0.02,
        }
    }

    /// A tiny configuration for gradient checks and unit tests.
    pub fn tiny() -> Self {
        ModelConfig {
            hidden: 8,
            heads: 2,
            lang_layers: 1,
            image_layers: 1,
            cross_layers: 1,
            vocab_size: 10,
            answer_count: 4,
            objects: 3,
            roi_dim: 6,
            box_dim: 4,
            max_len: 5,
            mlp_hidden: 16,
            init_std: 0.02,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_scale_is_valid() {
        let c = ModelConfig::full_scale_teacher(30_000, 3_129);
        c.validate().unwrap();
        assert_eq!(c.head_dim(), 64);
        assert_eq!(c.max_len, 20);
        assert_eq!(c.objects, 36);
    }
}
