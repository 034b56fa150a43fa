//! Confusion counts, threshold metrics and rank-based AUC. The positive
//! class is ACCEPT.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pose::RegistrationLabel;

/// Decision outcome relative to ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ErrorCategory {
    Tp,
    Tn,
    Fp,
    Fn,
}

impl ErrorCategory {
    pub const ALL: [ErrorCategory; 4] = [Self::Tp, Self::Tn, Self::Fp, Self::Fn];

    pub fn of(predicted: RegistrationLabel, truth: RegistrationLabel) -> Self {
        match (predicted.is_accept(), truth.is_accept()) {
            (true, true) => Self::Tp,
            (false, false) => Self::Tn,
            (true, false) => Self::Fp,
            (false, true) => Self::Fn,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Tp => "TP",
            Self::Tn => "TN",
            Self::Fp => "FP",
            Self::Fn => "FN",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::fmt::Display for ErrorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn tabulate(predicted: &[RegistrationLabel], truth: &[RegistrationLabel]) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(invalid("predictions and labels differ in length"));
        }
        let mut c = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            c.add(ErrorCategory::of(p, t));
        }
        Ok(c)
    }

    pub fn add(&mut self, cat: ErrorCategory) {
        *self.get_mut(cat) += 1;
    }

    pub fn get(&self, cat: ErrorCategory) -> usize {
        match cat {
            ErrorCategory::Tp => self.tp,
            ErrorCategory::Tn => self.tn,
            ErrorCategory::Fp => self.fp,
            ErrorCategory::Fn => self.fn_,
        }
    }

    fn get_mut(&mut self, cat: ErrorCategory) -> &mut usize {
        match cat {
            ErrorCategory::Tp => &mut self.tp,
            ErrorCategory::Tn => &mut self.tn,
            ErrorCategory::Fp => &mut self.fp,
            ErrorCategory::Fn => &mut self.fn_,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        match (self.precision(), self.recall()) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Metrics for one evaluation. `None` marks an undefined value (vanishing
/// denominator, or a single class for AUC).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
}

impl MetricReport {
    pub fn from_counts(counts: ConfusionCounts, auc: Option<f64>) -> Result<Self> {
        let accuracy = counts
            .accuracy()
            .ok_or_else(|| invalid("no samples to score"))?;
        Ok(Self {
            n: counts.total(),
            counts,
            accuracy,
            precision: counts.precision(),
            recall: counts.recall(),
            f1: counts.f1(),
            auc,
        })
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Accuracy => Some(self.accuracy),
            Metric::Precision => self.precision,
            Metric::Recall => self.recall,
            Metric::F1 => self.f1,
            Metric::Auc => self.auc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    Auc,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Self::Accuracy,
        Self::Precision,
        Self::Recall,
        Self::F1,
        Self::Auc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Accuracy => "accuracy",
            Self::Precision => "precision",
            Self::Recall => "recall",
            Self::F1 => "f1",
            Self::Auc => "auc",
        }
    }
}

/// Scores `p_accept` against truth, predicting ACCEPT iff `p ≥ 0.5`.
pub fn compute_metrics(p_accept: &[f64], truth: &[RegistrationLabel]) -> Result<MetricReport> {
    if p_accept.len() != truth.len() {
        return Err(invalid("probabilities and labels differ in length"));
    }
    if p_accept.is_empty() {
        return Err(invalid("no samples to score"));
    }
    if p_accept.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(invalid("probabilities must lie in [0, 1]"));
    }
    let predicted: Vec<RegistrationLabel> = p_accept
        .iter()
        .map(|&p| RegistrationLabel::from_accept(p >= 0.5))
        .collect();
    let counts = ConfusionCounts::tabulate(&predicted, truth)?;
    MetricReport::from_counts(counts, auc(p_accept, truth)?)
}

/// Mann–Whitney AUC with midranks for ties; `None` unless both classes
/// are present.
pub fn auc(scores: &[f64], truth: &[RegistrationLabel]) -> Result<Option<f64>> {
    if scores.len() != truth.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("scores contain NaN"));
    }
    let n_pos = truth.iter().filter(|l| l.is_accept()).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid
            * order[i..=j]
                .iter()
                .filter(|&&k| truth[k].is_accept())
                .count() as f64;
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(Some(u / (n_pos * n_neg) as f64))
}

/// Mean and standard deviation of one metric over the folds where it is
/// defined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Population standard deviation (divisor = number of defined values).
    pub std: Option<f64>,
    pub defined: usize,
    pub undefined: usize,
}

impl MetricSummary {
    pub fn of(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let (mean, std) = if n == 0 {
            (None, None)
        } else {
            let m = defined.iter().sum::<f64>() / n as f64;
            let var = defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
            (Some(m), Some(var.sqrt()))
        };
        Self {
            mean,
            std,
            defined: n,
            undefined: values.len() - n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub accuracy: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1: MetricSummary,
    pub auc: MetricSummary,
}

impl AggregateReport {
    pub fn of(reports: &[MetricReport]) -> Self {
        let col =
            |m: Metric| MetricSummary::of(&reports.iter().map(|r| r.get(m)).collect::<Vec<_>>());
        Self {
            folds: reports.len(),
            accuracy: col(Metric::Accuracy),
            precision: col(Metric::Precision),
            recall: col(Metric::Recall),
            f1: col(Metric::F1),
            auc: col(Metric::Auc),
        }
    }

    pub fn get(&self, metric: Metric) -> &MetricSummary {
        match metric {
            Metric::Accuracy => &self.accuracy,
            Metric::Precision => &self.precision,
            Metric::Recall => &self.recall,
            Metric::F1 => &self.f1,
            Metric::Auc => &self.auc,
        }
    }
}
