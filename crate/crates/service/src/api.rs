//! Wire types. Every response carries `schema`; requests reject unknown
//! fields and may name the schema they were written against.

use indexmap::IndexMap;
use mcat_core::adaptive::{Administered, SessionConfig, SessionStatus, StopReason};
use mcat_core::data::ThetaEstimate;
use serde::{Deserialize, Serialize};

pub const API_SCHEMA: &str = "mcat.api/v1";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bank_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<SessionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub respondent: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum AnswerValue {
    Category(usize),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<String>,
    pub question_id: String,
    pub answer: AnswerValue,
    /// Replaying a token returns the stored response without advancing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission_token: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Category,
    CategoryOrText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionView {
    pub id: String,
    pub text: String,
    pub categories: usize,
    pub response_kind: ResponseKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionResponse {
    pub schema: String,
    pub session_id: String,
    pub bank_id: String,
    pub question: QuestionView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSnapshot {
    pub theta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub scores: IndexMap<String, Option<f64>>,
}

impl EstimateSnapshot {
    pub fn new(est: &ThetaEstimate, scores: &IndexMap<String, Option<f64>>) -> Self {
        Self {
            theta: est.theta.iter().copied().collect(),
            covariance: rows(est),
            scores: scores.clone(),
        }
    }
}

fn rows(est: &ThetaEstimate) -> Vec<Vec<f64>> {
    est.covariance.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerResponse {
    pub schema: String,
    pub session_id: String,
    pub accepted: bool,
    /// Number of answered questions after this one.
    pub turn: usize,
    pub question_id: String,
    pub category: usize,
    pub next_question: Option<QuestionView>,
    pub stop_reason: Option<StopReason>,
    pub estimates: EstimateSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionView {
    pub schema: String,
    pub session_id: String,
    pub bank_id: String,
    pub respondent: Option<String>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub status: SessionStatus,
    pub answered: usize,
    pub max_items: usize,
    pub pending_question: Option<QuestionView>,
    pub administered: Vec<Administered>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub turn: usize,
    pub question_id: String,
    pub category: usize,
    pub theta: Vec<f64>,
    pub scores: IndexMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopState {
    pub stopped: bool,
    pub reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatesView {
    pub schema: String,
    pub session_id: String,
    pub turns: usize,
    pub theta: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub standard_errors: Vec<f64>,
    pub scores: IndexMap<String, Option<f64>>,
    /// One entry per answered question, oldest first.
    pub history: Vec<HistoryEntry>,
    pub stop: StopState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankItemView {
    pub id: String,
    pub text: String,
    pub categories: usize,
    pub factor_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankView {
    pub schema: String,
    pub bank_id: String,
    pub dimensions: usize,
    pub conditions: Vec<String>,
    pub items: Vec<BankItemView>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}
