//! JSON bodies exchanged between the labeling service and its clients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierConfig;
use crate::engine::{EngineError, RoundLog, RunLog, SessionConfig, Strategy, StrategyKind};
use crate::tilestore::Modality;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleKind {
    Human,
    GroundTruth,
}

fn default_batch() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub tileset: String,
    pub strategy: StrategyKind,
    pub modalities: Vec<Modality>,
    pub budget: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub seed: u64,
    pub oracle: OracleKind,
    /// Hold out a balanced test set (and report accuracy per round).
    #[serde(default)]
    pub evaluate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idempotency_key: Option<String>,
}

impl CreateSessionRequest {
    pub fn strategy(&self) -> Result<Strategy, EngineError> {
        Strategy::new(self.strategy, self.modalities.clone())
    }

    /// Reference classifier (with the requested learning rate, if any).
    pub fn session_config(&self) -> SessionConfig {
        let mut classifier = ClassifierConfig::reference();
        if let Some(lr) = self.learning_rate {
            classifier.learning_rate = lr;
        }
        SessionConfig {
            budget: self.budget,
            batch_size: self.batch,
            seed: self.seed,
            classifier,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    /// Waiting for labels from a human.
    AwaitingLabels,
    /// A ground-truth session still running.
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub schema_version: u32,
    pub session_id: String,
    pub tileset: String,
    pub strategy: Strategy,
    pub oracle: OracleKind,
    pub state: SessionState,
    pub round: usize,
    pub labels_used: usize,
    pub budget: usize,
    pub positives_found: usize,
    pub weights: Vec<f64>,
    pub pending_batch: Option<Vec<usize>>,
    pub last_round: Option<RoundLog>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub status: SessionStatus,
}

/// One queried tile as shown to an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRequest {
    pub session_id: String,
    pub tile_id: usize,
    /// Position in the full warmth ranking (0 is warmest).
    pub rank_position: usize,
    pub metric_value: f64,
    /// Base64-encoded PNG per modality name.
    pub previews: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub schema_version: u32,
    pub session_id: String,
    pub round: usize,
    pub requests: Vec<LabelRequest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileLabel {
    pub tile_id: usize,
    /// `"positive"` or `"negative"`.
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSubmission {
    pub labels: Vec<TileLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub tile_id: usize,
    pub center: (f64, f64),
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsResponse {
    pub schema_version: u32,
    pub status: SessionStatus,
    pub run_log: RunLog,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub schema_version: u32,
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<serde_json::Value>,
}

/// Accepts `positive`/`negative` (any case) and the `1`/`0` shorthands.
pub fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "positive" | "pos" | "1" => Some(true),
        "negative" | "neg" | "0" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_request_defaults() {
        let r: CreateSessionRequest = serde_json::from_str(
            r#"{"tileset":"site","strategy":"multimodal-single","modalities":["thermal"],"budget":50,"oracle":"human"}"#,
        )
        .unwrap();
        assert_eq!(r.batch, 10);
        assert_eq!(r.seed, 0);
        assert!(!r.evaluate);
        assert_eq!(r.modalities, vec![Modality::THERMAL]);
    }

    #[test]
    fn labels() {
        assert_eq!(parse_label("Positive"), Some(true));
        assert_eq!(parse_label("negative"), Some(false));
        assert_eq!(parse_label("maybe"), None);
    }
}
