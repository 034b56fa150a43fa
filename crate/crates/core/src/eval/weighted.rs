use serde::{Deserialize, Serialize};

use super::metrics::ErrorCategory;
use crate::error::{invalid, Result};

/// Deployment frequency of each error category, summing to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceWeights {
    pub tp: f64,
    pub tn: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
}

impl PrevalenceWeights {
    /// Category prevalences of the reference clinical test set.
    pub fn reference() -> Self {
        Self {
            tp: 0.226,
            tn: 0.534,
            fp: 0.188,
            fn_: 0.051,
        }
    }

    pub fn new(tp: f64, tn: f64, fp: f64, fn_: f64) -> Result<Self> {
        let w = Self { tp, tn, fp, fn_ };
        w.validate()?;
        Ok(w)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.tp, self.tn, self.fp, self.fn_]
    }

    pub fn get(&self, cat: ErrorCategory) -> f64 {
        self.as_array()[cat.index()]
    }

    /// The reference prevalences are rounded to 0.1% and sum to 0.999, so
    /// the tolerance is one rounding unit.
    pub fn validate(&self) -> Result<()> {
        let a = self.as_array();
        if a.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("prevalence weights must be non-negative"));
        }
        let sum: f64 = a.iter().sum();
        if (sum - 1.0).abs() > 1e-3 + 1e-9 {
            return Err(invalid(format!("prevalence weights sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// `Σ fraction_c · weight_c` with fractions ordered TP, TN, FP, FN.
pub fn weighted_accuracy(fractions: [f64; 4], weights: &PrevalenceWeights) -> Result<f64> {
    weights.validate()?;
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(invalid("fractions must lie in [0, 1]"));
    }
    Ok(fractions
        .iter()
        .zip(weights.as_array())
        .map(|(f, w)| f * w)
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedAccuracy {
    pub value: f64,
    /// Set when some categories had no cases and weights were renormalized
    /// over the rest.
    pub partial: bool,
}

/// Like [`weighted_accuracy`] but tolerating absent categories.
pub fn weighted_accuracy_available(
    fractions: [Option<f64>; 4],
    weights: &PrevalenceWeights,
) -> Result<Option<WeightedAccuracy>> {
    weights.validate()?;
    let w = weights.as_array();
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, wc) in fractions.iter().zip(w) {
        if let Some(f) = f {
            if !(0.0..=1.0).contains(f) {
                return Err(invalid("fractions must lie in [0, 1]"));
            }
            num += f * wc;
            den += wc;
        }
    }
    if fractions.iter().all(Option::is_some) {
        return Ok(Some(WeightedAccuracy {
            value: num,
            partial: false,
        }));
    }
    Ok((den > 0.0).then(|| WeightedAccuracy {
        value: num / den,
        partial: true,
    }))
}
