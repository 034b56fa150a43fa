//! Run-level configuration shared by every command. JSON, unknown keys
//! rejected; command-line flags override individual fields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::DEFAULT_ALPHA;
use crate::model::{ModelConfig, TrainConfig};
use crate::phantom::DatasetConfig;
use crate::pose::DEFAULT_THRESHOLD_MM;
use crate::review::ReviewConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// mTRE acceptance threshold; applied to the dataset section.
    pub threshold_mm: f64,
    /// Conformal miscoverage level.
    pub alpha: f64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub review: ReviewConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            threshold_mm: DEFAULT_THRESHOLD_MM,
            alpha: DEFAULT_ALPHA,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            review: ReviewConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small end-to-end setup: the separable toy dataset at 32 px and a
    /// 20-epoch budget.
    pub fn toy() -> Self {
        let dataset = DatasetConfig::toy_separable();
        Self {
            model: ModelConfig {
                input_size: dataset.geometry.image_width_px,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                epochs: 20,
                ..TrainConfig::default()
            },
            dataset,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Propagates shared settings into the sections and validates all of it.
    pub fn resolve(mut self) -> Result<Self> {
        if !(self.threshold_mm > 0.0) || !self.threshold_mm.is_finite() {
            return Err(Error::Config("threshold_mm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.alpha) || self.alpha == 0.0 {
            return Err(Error::Config("alpha must lie in (0, 1)".into()));
        }
        let ds = self.dataset.threshold_mm;
        if ds != DEFAULT_THRESHOLD_MM && ds != self.threshold_mm {
            return Err(Error::Config(format!(
                "dataset.threshold_mm ({ds}) conflicts with threshold_mm ({})",
                self.threshold_mm
            )));
        }
        self.dataset.threshold_mm = self.threshold_mm;
        self.train.seed = self.seed;
        self.dataset.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.review.cases_per_category == 0 {
            return Err(Error::Config(
                "review.cases_per_category must be positive".into(),
            ));
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        let err = serde_json::from_str::<RunConfig>(r#"{"model": {"input_sz": 64}}"#).unwrap_err();
        assert!(err.to_string().contains("input_sz"));
    }

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default().resolve().unwrap();
        assert_eq!(c.threshold_mm, 2.0);
        assert_eq!(c.alpha, 0.1);
        RunConfig::toy().resolve().unwrap();
    }

    #[test]
    fn threshold_propagates_and_conflicts() {
        let c: RunConfig = serde_json::from_str(r#"{"threshold_mm": 3.0}"#).unwrap();
        assert_eq!(c.resolve().unwrap().dataset.threshold_mm, 3.0);
        let c: RunConfig =
            serde_json::from_str(r#"{"threshold_mm": 3.0, "dataset": {"threshold_mm": 4.0}}"#)
                .unwrap();
        assert!(c.resolve().is_err());
    }
}
