//! Multi-branch patch classifier: one CNN backbone per patch, channel-wise
//! feature concatenation, global average pooling and a linear head over two
//! logits, followed by the thresholded bona-fide decision.

mod checkpoint;
mod evaluate;
mod network;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_CONFIG, CHECKPOINT_WEIGHTS};
pub use evaluate::{evaluate, score_all, Evaluation, Scorer};
pub use network::{standardize, Model, STD_FLOOR};
pub use train::{train, EpochStats, TrainConfig, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsError;
use crate::nn::NnError;

/// Ground truth class. The discriminants double as logit indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Attack = 0,
    BonaFide = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: u8) -> Option<Label> {
        match i {
            0 => Some(Label::Attack),
            1 => Some(Label::BonaFide),
            _ => None,
        }
    }
}

/// Softmax output of the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub p_bona_fide: f32,
    pub p_attack: f32,
}

impl Score {
    /// Builds a score from a bona-fide probability; the attack probability is its complement.
    pub fn from_bona_fide(p: f32) -> Score {
        Score {
            p_bona_fide: p,
            p_attack: 1.0 - p,
        }
    }

    /// Softmax over `[attack, bona fide]` logits.
    pub fn from_logits(logits: &[f32]) -> Score {
        let p = crate::nn::softmax(logits);
        Score {
            p_bona_fide: p[Label::BonaFide.index()],
            p_attack: p[Label::Attack.index()],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionConfig {
    pub threshold: f64,
}

impl Default for DecisionConfig {
    fn default() -> Self {
        DecisionConfig { threshold: 0.5 }
    }
}

impl DecisionConfig {
    pub fn new(threshold: f64) -> Result<Self, ModelError> {
        if threshold > 0.0 && threshold < 1.0 {
            Ok(DecisionConfig { threshold })
        } else {
            Err(ModelError::Config(format!("threshold {threshold} outside (0, 1)")))
        }
    }
}

/// Bona fide only when the score strictly exceeds the threshold; ties are rejected.
pub fn decide(score: &Score, cfg: &DecisionConfig) -> Label {
    if score.p_bona_fide as f64 > cfg.threshold {
        Label::BonaFide
    } else {
        Label::Attack
    }
}

/// One convolution block: `conv(kernel, stride, padding = kernel / 2) -> relu -> maxpool 2x2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvBlock {
    pub const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        ConvBlock { channels, kernel, stride }
    }
}

fn default_head_dim() -> usize {
    2
}

/// Weight initialization. Biases always use `±sqrt(1 / fan_in)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightInit {
    /// `±sqrt(1 / fan_in)`.
    #[default]
    FanIn,
    /// `±sqrt(6 / fan_in)`, the ReLU-gain variant.
    He,
}

impl WeightInit {
    pub fn bound(self, fan_in: usize) -> f32 {
        let gain = match self {
            WeightInit::FanIn => 1.0,
            WeightInit::He => 6.0,
        };
        (gain / fan_in.max(1) as f64).sqrt() as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub branches: usize,
    #[serde(default)]
    pub share_branch_weights: bool,
    pub backbone: Vec<ConvBlock>,
    /// Number of output logits; the classifier is binary so this must be 2.
    #[serde(default = "default_head_dim")]
    pub head_dim: usize,
    pub patch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub init: WeightInit,
    /// Shift and scale each patch channel to zero mean and unit deviation before the backbone.
    #[serde(default)]
    pub standardize_inputs: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            branches: 2,
            share_branch_weights: false,
            backbone: Self::default_backbone(),
            head_dim: 2,
            patch_size: 64,
            seed: 0,
            init: WeightInit::FanIn,
            standardize_inputs: false,
        }
    }
}

impl ModelConfig {
    /// Four 3x3 blocks widening 16 -> 32 -> 64 -> 128.
    pub fn default_backbone() -> Vec<ConvBlock> {
        [16, 32, 64, 128].into_iter().map(|c| ConvBlock::new(c, 3, 1)).collect()
    }

    /// Channel count of the last backbone block.
    pub fn backbone_out_channels(&self) -> usize {
        self.backbone.last().map_or(0, |b| b.channels)
    }

    /// Spatial extent after each block, or a config error if any block does not fit.
    pub fn spatial_extents(&self) -> Result<Vec<usize>, ModelError> {
        let mut size = self.patch_size;
        let mut sizes = Vec::with_capacity(self.backbone.len());
        for (i, block) in self.backbone.iter().enumerate() {
            let conv = crate::nn::ops::conv_output_extent(size, block.kernel, block.stride, block.kernel / 2)
                .ok_or_else(|| ModelError::Config(format!("block {i}: kernel {} does not fit {size}px input", block.kernel)))?;
            if conv < 2 || conv % 2 != 0 {
                return Err(ModelError::Config(format!(
                    "block {i}: {conv}px feature map cannot be max-pooled 2x2 (patch size {})",
                    self.patch_size
                )));
            }
            size = conv / 2;
            sizes.push(size);
        }
        Ok(sizes)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(1..=3).contains(&self.branches) {
            return Err(ModelError::Config(format!("branches must be 1, 2 or 3, got {}", self.branches)));
        }
        if self.head_dim != 2 {
            return Err(ModelError::Config(format!("head_dim must be 2, got {}", self.head_dim)));
        }
        if self.backbone.is_empty() {
            return Err(ModelError::Config("backbone needs at least one block".into()));
        }
        for (i, b) in self.backbone.iter().enumerate() {
            if b.channels == 0 || b.stride == 0 || b.kernel % 2 == 0 {
                return Err(ModelError::Config(format!(
                    "block {i}: channels and stride must be positive and kernel odd, got {b:?}"
                )));
            }
        }
        self.spatial_extents().map(|_| ())
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("model has {expected} branches but received {actual} patches")]
    Arity { expected: usize, actual: usize },
    #[error("patch is {actual}px but the model expects {expected}px")]
    PatchSize { expected: usize, actual: usize },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f32 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{0}: {1}")]
    Io(String, std::io::Error),
    #[error("checkpoint config: {0}")]
    Json(#[from] serde_json::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decide_follows_threshold() {
        let h = DecisionConfig::default();
        assert_eq!(decide(&Score::from_bona_fide(0.7), &h), Label::BonaFide);
        assert_eq!(decide(&Score::from_bona_fide(0.3), &h), Label::Attack);
        assert_eq!(decide(&Score::from_bona_fide(0.5), &h), Label::Attack);
    }

    #[test]
    fn decide_is_monotone() {
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for &h in &grid {
            let cfg = DecisionConfig::new(h).unwrap();
            let mut prev = Label::Attack;
            for i in 0..=1000 {
                let l = decide(&Score::from_bona_fide(i as f32 / 1000.0), &cfg);
                assert!(!(prev == Label::BonaFide && l == Label::Attack));
                prev = l;
            }
        }
        for i in 0..=100 {
            let s = Score::from_bona_fide(i as f32 / 100.0);
            let mut prev = Label::BonaFide;
            for &h in &grid {
                let l = decide(&s, &DecisionConfig::new(h).unwrap());
                assert!(!(prev == Label::Attack && l == Label::BonaFide));
                prev = l;
            }
        }
    }

    #[test]
    fn threshold_range_is_open() {
        assert!(DecisionConfig::new(0.0).is_err());
        assert!(DecisionConfig::new(1.0).is_err());
        assert!(DecisionConfig::new(0.01).is_ok());
    }

    #[test]
    fn default_backbone_extents() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.spatial_extents().unwrap(), vec![32, 16, 8, 4]);
        let tiny = ModelConfig {
            patch_size: 8,
            ..ModelConfig::default()
        };
        assert!(matches!(tiny.validate(), Err(ModelError::Config(_))));
    }

    #[test]
    fn score_sums_to_one() {
        let s = Score::from_logits(&[0.3, -1.2]);
        assert!((s.p_bona_fide + s.p_attack - 1.0).abs() < 1e-6);
        assert!(s.p_attack > s.p_bona_fide);
    }
}
