use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture of the verifier network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side length, pixels.
    pub input_size: usize,
    /// Output channels of the two-channel stem block.
    pub stem_out_channels: usize,
    /// Output channels of each following standard block.
    pub block_channel_sequence: Vec<usize>,
    pub attention_heads: usize,
    /// Token embedding size; must equal half the last block's channels.
    pub attention_dim: Option<usize>,
    /// Dropout probability before the output layer.
    pub dropout_rate: f64,
    pub fc_hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 128,
            stem_out_channels: 16,
            block_channel_sequence: vec![32, 64],
            attention_heads: 1,
            attention_dim: None,
            dropout_rate: 0.3,
            fc_hidden: None,
        }
    }
}

impl ModelConfig {
    /// Input channels: X-ray and DRR.
    pub const IN_CHANNELS: usize = 2;

    pub fn stages(&self) -> usize {
        1 + self.block_channel_sequence.len()
    }

    pub fn last_channels(&self) -> usize {
        *self
            .block_channel_sequence
            .last()
            .unwrap_or(&self.stem_out_channels)
    }

    /// Spatial side of the last convolutional feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size >> self.stages()
    }

    pub fn branch_channels(&self) -> usize {
        self.last_channels() / 2
    }

    pub fn flat_features(&self) -> usize {
        self.branch_channels() * self.feature_size() * self.feature_size()
    }

    /// `(in, out)` channels for every block, stem first.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        let mut out = vec![(Self::IN_CHANNELS, self.stem_out_channels)];
        let mut prev = self.stem_out_channels;
        for &c in &self.block_channel_sequence {
            out.push((prev, c));
            prev = c;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || self.stem_out_channels == 0 {
            return err("input size and stem channels must be positive".into());
        }
        for (i, &c) in std::iter::once(&self.stem_out_channels)
            .chain(&self.block_channel_sequence)
            .enumerate()
        {
            if c == 0 || c % 2 != 0 {
                return err(format!(
                    "block {i} channel count {c} must be positive and even"
                ));
            }
        }
        let div = 1usize << self.stages();
        if !self.input_size.is_multiple_of(div) {
            return err(format!(
                "input size {} not divisible by 2^{} pooling stages",
                self.input_size,
                self.stages()
            ));
        }
        if self.attention_heads == 0 || !self.branch_channels().is_multiple_of(self.attention_heads)
        {
            return err(format!(
                "{} attention heads do not divide branch width {}",
                self.attention_heads,
                self.branch_channels()
            ));
        }
        if let Some(d) = self.attention_dim {
            if d != self.branch_channels() {
                return err(format!(
                    "attention_dim {d} must equal the branch width {}",
                    self.branch_channels()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return err("dropout rate must be below 1".into());
        }
        if self.fc_hidden == Some(0) {
            return err("fc_hidden must be positive when set".into());
        }
        Ok(())
    }
}

/// Optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    /// Accepted:rejected ratio targeted by oversampling.
    pub oversample_ratio: f64,
    /// Projections with a rejected fraction strictly above this are dropped
    /// from training.
    pub max_reject_fraction: f64,
    pub augment: crate::phantom::AugmentParams,
    /// Fraction of training-specimen projections held out for conformal
    /// calibration.
    pub calibration_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.0002,
            weight_decay: 0.00005,
            batch_size: 16,
            epochs: 50,
            seed: 0,
            patience: 10,
            oversample_ratio: 1.0,
            max_reject_fraction: 0.9,
            augment: crate::phantom::AugmentParams::default(),
            calibration_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "learning rate and weight decay must be non-negative".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.calibration_fraction) {
            return Err(Error::Config(
                "calibration fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.oversample_ratio >= 0.0) || !(0.0..=1.0).contains(&self.max_reject_fraction) {
            return Err(Error::Config(
                "oversample ratio / reject fraction out of range".into(),
            ));
        }
        self.augment.validate()
    }
}
