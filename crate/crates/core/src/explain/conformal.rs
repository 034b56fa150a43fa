//! Split conformal prediction over the two registration labels.
//!
//! Score: `1 − p(label)`. Threshold: the `⌈(n+1)(1−α)⌉`-th smallest
//! calibration score, clamped to the largest.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::VerifierModel;
use crate::phantom::{ImagePair, RegistrationSample};
use crate::pose::RegistrationLabel;

pub const DEFAULT_ALPHA: f64 = 0.1;
/// Smallest calibration set accepted from a model.
pub const MIN_CALIBRATION: usize = 10;

/// `1 − p(label)` for `probs = [p_accept, p_reject]`.
pub fn nonconformity(probs: [f64; 2], label: RegistrationLabel) -> Result<f64> {
    let [pa, pr] = probs;
    if !(0.0..=1.0).contains(&pa) || !(0.0..=1.0).contains(&pr) || (pa + pr - 1.0).abs() > 1e-6 {
        return Err(invalid(format!("invalid probability pair ({pa}, {pr})")));
    }
    Ok(match label {
        RegistrationLabel::Accept => 1.0 - pa,
        RegistrationLabel::Reject => 1.0 - pr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibration {
    pub alpha: f64,
    pub threshold: f64,
    pub n: usize,
    /// Sorted ascending.
    pub scores: Vec<f64>,
}

impl ConformalCalibration {
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(invalid(format!("alpha {alpha} outside [0, 1)")));
        }
        if scores.is_empty() {
            return Err(invalid("no calibration scores"));
        }
        if scores.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(invalid("calibration scores must lie in [0, 1]"));
        }
        scores.sort_by(f64::total_cmp);
        let n = scores.len();
        let rank = ((n as f64 + 1.0) * (1.0 - alpha) - 1e-9).ceil().max(1.0) as usize;
        let threshold = scores[rank.min(n) - 1];
        Ok(Self {
            alpha,
            threshold,
            n,
            scores,
        })
    }

    pub fn predict(&self, probs: [f64; 2]) -> Result<PredictionSet> {
        predict_set(self.threshold, probs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_slice(&bytes)?;
        let check = Self::from_scores(c.scores.clone(), c.alpha)?;
        if check.threshold != c.threshold || check.n != c.n {
            return Err(invalid("calibration file is inconsistent with its scores"));
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub accept: f64,
    pub reject: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub labels: Vec<RegistrationLabel>,
    pub scores: LabelScores,
    pub threshold: f64,
    /// True iff the set is a genuine singleton.
    pub certain: bool,
    /// Set when no label met the threshold and the best label was returned.
    pub fallback: bool,
}

impl PredictionSet {
    pub fn contains(&self, label: RegistrationLabel) -> bool {
        self.labels.contains(&label)
    }
}

pub fn predict_set(threshold: f64, probs: [f64; 2]) -> Result<PredictionSet> {
    let accept = nonconformity(probs, RegistrationLabel::Accept)?;
    let reject = nonconformity(probs, RegistrationLabel::Reject)?;
    let mut labels = Vec::with_capacity(2);
    if accept <= threshold {
        labels.push(RegistrationLabel::Accept);
    }
    if reject <= threshold {
        labels.push(RegistrationLabel::Reject);
    }
    let fallback = labels.is_empty();
    if fallback {
        // ties go to the model's own decision (accept iff p_accept >= 0.5)
        labels.push(RegistrationLabel::from_accept(accept <= reject));
    }
    Ok(PredictionSet {
        certain: labels.len() == 1 && !fallback,
        labels,
        scores: LabelScores { accept, reject },
        threshold,
        fallback,
    })
}

/// Scores a held-out calibration split with its true labels.
pub fn calibrate(
    model: &VerifierModel,
    samples: &[RegistrationSample],
    training_ids: &HashSet<String>,
    alpha: f64,
) -> Result<ConformalCalibration> {
    let leaked: Vec<String> = samples
        .iter()
        .map(|s| s.uid())
        .filter(|id| training_ids.contains(id))
        .collect();
    if !leaked.is_empty() {
        return Err(Error::DataLeakage(leaked));
    }
    if samples.len() < MIN_CALIBRATION {
        return Err(invalid(format!(
            "calibration needs at least {MIN_CALIBRATION} samples, got {}",
            samples.len()
        )));
    }
    let pairs: Vec<&ImagePair> = samples.iter().map(|s| &s.pair).collect();
    let logits = model.predict_logits(&pairs, 32)?;
    let scores = logits
        .iter()
        .zip(samples)
        .map(|(&z, s)| {
            let p = crate::model::sigmoid(z);
            nonconformity([p, 1.0 - p], s.label)
        })
        .collect::<Result<Vec<_>>>()?;
    ConformalCalibration::from_scores(scores, alpha)
}

/// Runs the model on `pair` and builds its prediction set.
pub fn predict_set_for(
    model: &VerifierModel,
    calibration: &ConformalCalibration,
    pair: &ImagePair,
) -> Result<PredictionSet> {
    let out = model.forward(pair)?;
    calibration.predict(out.probabilities())
}

#[cfg(test)]
mod tests {
    use super::*;
    use RegistrationLabel::{Accept, Reject};

    #[test]
    fn nonconformity_examples() {
        assert_eq!(nonconformity([1.0, 0.0], Accept).unwrap(), 0.0);
        assert!((nonconformity([0.3, 0.7], Accept).unwrap() - 0.7).abs() < 1e-12);
        assert!((nonconformity([0.3, 0.7], Reject).unwrap() - 0.3).abs() < 1e-12);
        assert!(nonconformity([0.3, 0.3], Accept).is_err());
    }

    fn nine() -> Vec<f64> {
        (1..=9).map(|k| k as f64 * 0.05).collect()
    }

    #[test]
    fn quantile_rule() {
        let c = ConformalCalibration::from_scores(nine(), 0.1).unwrap();
        assert_eq!(c.threshold, 0.45);
        // ⌈10 · 0.5⌉ = 5 → 0.25
        assert_eq!(
            ConformalCalibration::from_scores(nine(), 0.5)
                .unwrap()
                .threshold,
            0.25
        );
    }

    #[test]
    fn tiny_alpha_clamps_to_max() {
        let c = ConformalCalibration::from_scores(nine(), 1e-6).unwrap();
        assert_eq!(c.threshold, 0.45);
        let c = ConformalCalibration::from_scores(nine(), 0.0).unwrap();
        assert_eq!(c.threshold, 0.45);
    }

    #[test]
    fn all_zero_scores() {
        let c = ConformalCalibration::from_scores(vec![0.0; 20], 0.1).unwrap();
        assert_eq!(c.threshold, 0.0);
    }

    #[test]
    fn worked_sets() {
        let s = predict_set(0.45, [0.97, 0.03]).unwrap();
        assert_eq!(s.labels, vec![Accept]);
        assert!(s.certain && !s.fallback);
        assert!((s.scores.accept - 0.03).abs() < 1e-12 && (s.scores.reject - 0.97).abs() < 1e-12);

        let s = predict_set(0.45, [0.60, 0.40]).unwrap();
        assert_eq!(s.labels, vec![Accept]);
        let s = predict_set(0.45, [0.56, 0.44]).unwrap();
        assert_eq!(s.labels, vec![Accept]);

        let s = predict_set(0.45, [0.50, 0.50]).unwrap();
        assert_eq!(s.labels.len(), 1);
        assert!(s.fallback && !s.certain);

        let s = predict_set(1.0, [0.8, 0.2]).unwrap();
        assert_eq!(s.labels, vec![Accept, Reject]);
        assert!(!s.certain);
    }

    #[test]
    fn bad_alpha_rejected() {
        assert!(ConformalCalibration::from_scores(nine(), 1.0).is_err());
        assert!(ConformalCalibration::from_scores(nine(), -0.1).is_err());
        assert!(ConformalCalibration::from_scores(vec![1.2], 0.1).is_err());
    }
}
