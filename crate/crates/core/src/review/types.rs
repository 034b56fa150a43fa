use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ErrorCategory;
use crate::pose::RegistrationLabel;

/// Which AI assistance an operator sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StudyCondition {
    HumanOnly,
    AiOnly,
    HumanAi,
    HumanXai,
}

impl StudyCondition {
    pub const ALL: [StudyCondition; 4] =
        [Self::HumanOnly, Self::AiOnly, Self::HumanAi, Self::HumanXai];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::HumanOnly => "HUMAN_ONLY",
            Self::AiOnly => "AI_ONLY",
            Self::HumanAi => "HUMAN_AI",
            Self::HumanXai => "HUMAN_XAI",
        }
    }

    pub fn shows_ai(self) -> bool {
        self != Self::HumanOnly
    }

    pub fn shows_explanations(self) -> bool {
        self == Self::HumanXai
    }

    pub fn human_input(self) -> bool {
        self != Self::AiOnly
    }
}

impl std::fmt::Display for StudyCondition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for StudyCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown condition {s:?}")))
    }
}

/// The conformal set as shown to operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSetView {
    pub labels: Vec<RegistrationLabel>,
    pub certain: bool,
}

/// AI assistance exactly as it was (or would be) shown; absent fields are
/// omitted from JSON, never `null`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AiFields {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_prediction: Option<RegistrationLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ai_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction_set: Option<PredictionSetView>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CasePayload {
    pub session_id: String,
    pub condition: StudyCondition,
    pub case_id: String,
    /// 1-based position within the condition.
    pub index: usize,
    pub total: usize,
    pub xray_url: String,
    pub drr_url: String,
    pub human_input_enabled: bool,
    /// Set when the AI decision has already been recorded (AI_ONLY).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auto_decision: Option<RegistrationLabel>,
    #[serde(flatten)]
    pub ai: AiFields,
}

/// Answer to `next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextCase {
    Case(CasePayload),
    /// Every case of `condition` is answered; a survey must follow.
    ConditionComplete {
        condition: StudyCondition,
        survey_required: bool,
    },
    SessionComplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub participant: String,
    pub seed: u64,
    pub condition_order: Vec<StudyCondition>,
    pub cases: BTreeMap<StudyCondition, Vec<String>>,
    pub created_at_ms: u64,
}

/// Session plus derived progress, as returned by the API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    #[serde(flatten)]
    pub session: Session,
    pub status: SessionStatus,
    pub current_condition: Option<StudyCondition>,
    pub decisions: usize,
    pub surveys: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub participant: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionInput {
    pub case_id: String,
    pub decision: RegistrationLabel,
    #[serde(default)]
    pub client_latency_ms: Option<u64>,
    /// Lets a client retry a submission safely: a repeat with the same key
    /// and decision is acknowledged instead of rejected as a duplicate.
    #[serde(default)]
    pub idempotency_key: Option<String>,
}

/// Moves past an auto-decided (AI_ONLY) case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcknowledgeInput {
    pub case_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub session_id: String,
    pub participant: String,
    pub condition: StudyCondition,
    pub case_id: String,
    /// `None` in AI_ONLY, where the AI decides.
    pub human_decision: Option<RegistrationLabel>,
    pub final_decision: RegistrationLabel,
    pub ground_truth: RegistrationLabel,
    /// The AI's error category for this case.
    pub category: ErrorCategory,
    pub correct: bool,
    pub shown: AiFields,
    pub server_latency_ms: u64,
    pub client_latency_ms: Option<u64>,
    pub issued_at_ms: u64,
    pub decided_at_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TlxScores {
    pub mental_demand: i64,
    pub physical_demand: i64,
    pub temporal_demand: i64,
    pub performance: i64,
    pub effort: i64,
    pub frustration: i64,
}

impl TlxScores {
    pub const NAMES: [&'static str; 6] = [
        "mental_demand",
        "physical_demand",
        "temporal_demand",
        "performance",
        "effort",
        "frustration",
    ];

    pub fn values(&self) -> [i64; 6] {
        [
            self.mental_demand,
            self.physical_demand,
            self.temporal_demand,
            self.performance,
            self.effort,
            self.frustration,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AiEvaluation {
    pub usefulness: i64,
    pub trust: i64,
    pub understanding: i64,
}

impl AiEvaluation {
    pub const NAMES: [&'static str; 3] = ["usefulness", "trust", "understanding"];

    pub fn values(&self) -> [i64; 3] {
        [self.usefulness, self.trust, self.understanding]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyInput {
    pub condition: StudyCondition,
    pub tlx: TlxScores,
    #[serde(default)]
    pub ai: Option<AiEvaluation>,
    #[serde(default)]
    pub free_text: Option<String>,
}

impl SurveyInput {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in TlxScores::NAMES.iter().zip(self.tlx.values()) {
            if !(0..=100).contains(&v) {
                return Err(Error::Validation(format!(
                    "TLX {name} = {v} outside 0..=100"
                )));
            }
        }
        match (&self.ai, self.condition.shows_ai()) {
            (Some(_), false) => {
                return Err(Error::Validation(format!(
                    "AI evaluation items are not allowed for {}",
                    self.condition
                )))
            }
            (None, true) => {
                return Err(Error::Validation(format!(
                    "AI evaluation items are required for {}",
                    self.condition
                )))
            }
            _ => {}
        }
        if let Some(ai) = &self.ai {
            for (name, v) in AiEvaluation::NAMES.iter().zip(ai.values()) {
                if !(1..=7).contains(&v) {
                    return Err(Error::Validation(format!("{name} = {v} outside 1..=7")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyResponse {
    pub session_id: String,
    pub participant: String,
    #[serde(flatten)]
    pub input: SurveyInput,
    pub submitted_at_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    pub session_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub server_latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReviewConfig {
    pub cases_per_category: usize,
    /// Reuse the same cases in every condition instead of disjoint lists.
    pub share_cases: bool,
    pub window: f32,
    pub level: f32,
    pub heatmap_alpha: f32,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        Self {
            cases_per_category: 3,
            share_cases: false,
            window: 1.0,
            level: 0.5,
            heatmap_alpha: 0.6,
        }
    }
}
