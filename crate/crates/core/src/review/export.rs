//! Scored study exports: per-condition category accuracies with
//! prevalence weighting, plus the raw decision and survey tables.

use serde::{Deserialize, Serialize};

use super::types::{AiEvaluation, DecisionRecord, StudyCondition, SurveyResponse, TlxScores};
use crate::error::Result;
use crate::eval::{weighted_accuracy_available, ErrorCategory, PrevalenceWeights};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExportFilter {
    #[serde(default)]
    pub condition: Option<StudyCondition>,
    #[serde(default)]
    pub participant: Option<String>,
    /// Only sessions that finished every condition and survey.
    #[serde(default)]
    pub completed_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: ErrorCategory,
    pub n: usize,
    pub correct: usize,
    pub fraction_correct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: StudyCondition,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub categories: Vec<CategoryScore>,
    pub weighted_accuracy: Option<f64>,
    /// Weights were renormalized over the categories present.
    pub weighted_partial: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Export {
    pub weights: PrevalenceWeights,
    pub summary: Vec<ConditionSummary>,
    pub decisions: Vec<DecisionRecord>,
    pub surveys: Vec<SurveyResponse>,
}

pub fn summarize(
    decisions: &[DecisionRecord],
    cond: StudyCondition,
    weights: &PrevalenceWeights,
) -> Option<ConditionSummary> {
    let rows: Vec<&DecisionRecord> = decisions.iter().filter(|d| d.condition == cond).collect();
    if rows.is_empty() {
        return None;
    }
    let categories: Vec<CategoryScore> = ErrorCategory::ALL
        .iter()
        .map(|&c| {
            let n = rows.iter().filter(|d| d.category == c).count();
            let correct = rows.iter().filter(|d| d.category == c && d.correct).count();
            CategoryScore {
                category: c,
                n,
                correct,
                fraction_correct: (n > 0).then(|| correct as f64 / n as f64),
            }
        })
        .collect();
    let fractions = [0, 1, 2, 3].map(|i| categories[i].fraction_correct);
    let weighted =
        weighted_accuracy_available(fractions, weights).expect("reference weights are valid");
    let correct = rows.iter().filter(|d| d.correct).count();
    Some(ConditionSummary {
        condition: cond,
        n: rows.len(),
        correct,
        accuracy: correct as f64 / rows.len() as f64,
        categories,
        weighted_accuracy: weighted.map(|w| w.value),
        weighted_partial: weighted.is_some_and(|w| w.partial),
    })
}

/// Pure function of the recorded events; rows are ordered by session,
/// condition and decision time.
pub fn build_export(
    mut decisions: Vec<DecisionRecord>,
    mut surveys: Vec<SurveyResponse>,
    filter: &ExportFilter,
) -> Export {
    let keep_participant = |p: &str| filter.participant.as_deref().is_none_or(|f| f == p);
    decisions.retain(|d| {
        filter.condition.is_none_or(|c| c == d.condition) && keep_participant(&d.participant)
    });
    surveys.retain(|s| {
        filter.condition.is_none_or(|c| c == s.input.condition) && keep_participant(&s.participant)
    });
    decisions.sort_by(|a, b| {
        (&a.session_id, a.condition, a.decided_at_ms, &a.case_id).cmp(&(
            &b.session_id,
            b.condition,
            b.decided_at_ms,
            &b.case_id,
        ))
    });
    surveys.sort_by(|a, b| {
        (&a.session_id, a.input.condition).cmp(&(&b.session_id, b.input.condition))
    });
    let weights = PrevalenceWeights::reference();
    let summary = StudyCondition::ALL
        .iter()
        .filter_map(|&c| summarize(&decisions, c, &weights))
        .collect();
    Export {
        weights,
        summary,
        decisions,
        surveys,
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| std::io::Error::other(e.to_string()))
        .map_err(csv::Error::from)?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub const SUMMARY_COLUMNS: [&str; 19] = [
    "condition",
    "n",
    "correct",
    "accuracy",
    "tp_n",
    "tp_correct",
    "tp_fraction",
    "tn_n",
    "tn_correct",
    "tn_fraction",
    "fp_n",
    "fp_correct",
    "fp_fraction",
    "fn_n",
    "fn_correct",
    "fn_fraction",
    "weighted_accuracy",
    "weighted_partial",
    "weights",
];

pub fn summary_csv(export: &Export) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(SUMMARY_COLUMNS)?;
    let weights = format!(
        "TP={};TN={};FP={};FN={}",
        export.weights.tp, export.weights.tn, export.weights.fp, export.weights.fn_
    );
    for s in &export.summary {
        let mut row = vec![
            s.condition.to_string(),
            s.n.to_string(),
            s.correct.to_string(),
            s.accuracy.to_string(),
        ];
        for c in &s.categories {
            row.extend([
                c.n.to_string(),
                c.correct.to_string(),
                opt(c.fraction_correct),
            ]);
        }
        row.extend([
            opt(s.weighted_accuracy),
            s.weighted_partial.to_string(),
            weights.clone(),
        ]);
        w.write_record(&row)?;
    }
    finish(w)
}

pub const DECISION_COLUMNS: [&str; 18] = [
    "session_id",
    "participant",
    "condition",
    "case_id",
    "human_decision",
    "final_decision",
    "ground_truth",
    "category",
    "correct",
    "shown_prediction",
    "shown_probability",
    "shown_heatmap",
    "shown_set",
    "shown_set_certain",
    "server_latency_ms",
    "client_latency_ms",
    "issued_at_ms",
    "decided_at_ms",
];

pub fn decisions_csv(export: &Export) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(DECISION_COLUMNS)?;
    for d in &export.decisions {
        let set = d.shown.prediction_set.as_ref();
        w.write_record([
            d.session_id.clone(),
            d.participant.clone(),
            d.condition.to_string(),
            d.case_id.clone(),
            opt(d.human_decision),
            d.final_decision.to_string(),
            d.ground_truth.to_string(),
            d.category.to_string(),
            d.correct.to_string(),
            opt(d.shown.ai_prediction),
            opt(d.shown.ai_probability),
            opt(d.shown.heatmap_url.clone()),
            set.map(|s| {
                s.labels
                    .iter()
                    .map(|l| l.as_str())
                    .collect::<Vec<_>>()
                    .join("|")
            })
            .unwrap_or_default(),
            opt(set.map(|s| s.certain)),
            d.server_latency_ms.to_string(),
            opt(d.client_latency_ms),
            d.issued_at_ms.to_string(),
            d.decided_at_ms.to_string(),
        ])?;
    }
    finish(w)
}

pub fn survey_columns() -> Vec<&'static str> {
    let mut cols = vec!["session_id", "participant", "condition"];
    cols.extend(TlxScores::NAMES);
    cols.extend(AiEvaluation::NAMES);
    cols.extend(["free_text", "submitted_at_ms"]);
    cols
}

pub fn surveys_csv(export: &Export) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(survey_columns())?;
    for s in &export.surveys {
        let mut row = vec![
            s.session_id.clone(),
            s.participant.clone(),
            s.input.condition.to_string(),
        ];
        row.extend(s.input.tlx.values().iter().map(|v| v.to_string()));
        match &s.input.ai {
            Some(ai) => row.extend(ai.values().iter().map(|v| v.to_string())),
            None => row.extend(["", "", ""].map(String::from)),
        }
        row.push(s.input.free_text.clone().unwrap_or_default());
        row.push(s.submitted_at_ms.to_string());
        w.write_record(&row)?;
    }
    finish(w)
}
