//! The active-learning loop.
//!
//! Each round walks the ranked unlabeled tiles from the top, scores each
//! tile with the (weighted) model outputs, samples a class from that score
//! and keeps sampled positives until the batch holds `b` tiles. The batch
//! is labeled, ensemble weights are recomputed from the number of queried
//! tiles each model classified correctly, a balanced training set is drawn
//! and the models are retrained from their initial weights.
//!
//! Baseline strategies (random, uncertainty, positive certainty, disagree)
//! share everything except the batch choice.

mod session;

pub use session::{
    ActiveSession, BatchPlan, GroundTruthOracle, LabeledTile, Labeler, LabelerError, RoundLog,
    RoundOutcome, RunLog, SessionConfig, SessionData, TestSet, RUN_LOG_SCHEMA_VERSION,
};

use num_rational::Ratio;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

use crate::tilestore::Modality;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{outputs} model outputs but {weights} weights")]
    LengthMismatch { outputs: usize, weights: usize },
    #[error("ensemble weights sum to {0}, not 1")]
    WeightsNotNormalised(f64),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("invalid session: {0}")]
    InvalidSession(String),
    #[error("labels do not match the issued batch: {0}")]
    BatchMismatch(String),
    #[error("labeler failed: {0}")]
    Labeler(#[from] LabelerError),
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
    #[error(transparent)]
    Ranking(#[from] crate::ranking::RankingError),
    #[error(transparent)]
    Tilestore(#[from] crate::tilestore::TilestoreError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    MultimodalSingle,
    MultimodalEnsemble,
    Random,
    Uncertainty,
    PositiveCertainty,
    Disagree,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::MultimodalSingle,
        StrategyKind::MultimodalEnsemble,
        StrategyKind::Random,
        StrategyKind::Uncertainty,
        StrategyKind::PositiveCertainty,
        StrategyKind::Disagree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::MultimodalSingle => "multimodal-single",
            StrategyKind::MultimodalEnsemble => "multimodal-ensemble",
            StrategyKind::Random => "random",
            StrategyKind::Uncertainty => "uncertainty",
            StrategyKind::PositiveCertainty => "positive-certainty",
            StrategyKind::Disagree => "disagree",
        }
    }

    /// Whether batches come from the ranked walk.
    pub fn uses_ranking(self) -> bool {
        matches!(
            self,
            StrategyKind::MultimodalSingle | StrategyKind::MultimodalEnsemble
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| EngineError::InvalidStrategy(format!("unknown strategy {s:?}")))
    }
}

/// A query strategy and the modality each of its classifiers sees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    pub modalities: Vec<Modality>,
}

impl Strategy {
    pub fn new(kind: StrategyKind, modalities: Vec<Modality>) -> Result<Self> {
        let s = Self { kind, modalities };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modalities.len();
        let ok = match self.kind {
            StrategyKind::MultimodalEnsemble | StrategyKind::Disagree => m >= 2,
            _ => m == 1,
        };
        if !ok {
            let need = match self.kind {
                StrategyKind::MultimodalEnsemble | StrategyKind::Disagree => {
                    "at least 2 modalities"
                }
                _ => "exactly 1 modality",
            };
            return Err(EngineError::InvalidStrategy(format!(
                "{} needs {need}, got {m}",
                self.kind
            )));
        }
        for (i, a) in self.modalities.iter().enumerate() {
            if self.modalities[..i].contains(a) {
                return Err(EngineError::InvalidStrategy(format!(
                    "modality {a} listed twice"
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mods: Vec<String> = self.modalities.iter().map(|m| m.to_string()).collect();
        format!("{}[{}]", self.kind, mods.join(","))
    }
}

/// Per-model weights with the correct-classification counts they derive from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleWeights {
    pub correct: Vec<u64>,
    pub weights: Vec<f64>,
}

impl EnsembleWeights {
    pub fn uniform(models: usize) -> Self {
        Self {
            correct: vec![0; models],
            weights: vec![1.0 / models as f64; models],
        }
    }

    /// `weight_m = correct_m / sum(correct)`; keeps `previous` when the sum is 0.
    pub fn from_counts(correct: Vec<u64>, previous: &EnsembleWeights) -> Self {
        let total: u64 = correct.iter().sum();
        let weights = if total == 0 {
            previous.weights.clone()
        } else {
            correct.iter().map(|&c| c as f64 / total as f64).collect()
        };
        Self { correct, weights }
    }

    /// Exact weights as rationals over the counts.
    pub fn ratios(&self) -> Vec<Ratio<u64>> {
        let total: u64 = self.correct.iter().sum();
        if total == 0 {
            let m = self.correct.len() as u64;
            return vec![Ratio::new(1, m); self.correct.len()];
        }
        self.correct.iter().map(|&c| Ratio::new(c, total)).collect()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Recomputes weights from every queried label and each model's thresholded
/// prediction on it (`predictions[m][i]` for model `m`, instance `i`).
pub fn update_weights(
    previous: &EnsembleWeights,
    labels: &[bool],
    predictions: &[Vec<bool>],
) -> EnsembleWeights {
    let correct = predictions
        .iter()
        .map(|preds| preds.iter().zip(labels).filter(|(p, y)| p == y).count() as u64)
        .collect();
    EnsembleWeights::from_counts(correct, previous)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub negative: f64,
    pub positive: f64,
}

/// `score_i = sum_m weight_m * output_{m,i}` for both classes.
pub fn ensemble_score(outputs: &[f64], weights: &[f64]) -> Result<ClassScore> {
    if outputs.len() != weights.len() || outputs.is_empty() {
        return Err(EngineError::LengthMismatch {
            outputs: outputs.len(),
            weights: weights.len(),
        });
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(EngineError::WeightsNotNormalised(sum));
    }
    let positive: f64 = outputs.iter().zip(weights).map(|(p, w)| w * p).sum();
    let negative: f64 = outputs
        .iter()
        .zip(weights)
        .map(|(p, w)| w * (1.0 - p))
        .sum();
    Ok(ClassScore { negative, positive })
}

/// Draws the positive class with probability `score.positive`.
pub fn sample_prediction<R: Rng + ?Sized>(score: ClassScore, rng: &mut R) -> bool {
    rng.random::<f64>() < score.positive
}

/// All positives plus as many uniformly drawn negatives (or all of them if
/// fewer); the whole set when nothing positive has been labeled.
pub fn select_training_set<R: Rng + ?Sized>(
    labeled: &[(usize, bool)],
    rng: &mut R,
) -> Vec<(usize, bool)> {
    let positives: Vec<(usize, bool)> = labeled.iter().copied().filter(|(_, y)| *y).collect();
    if positives.is_empty() {
        return labeled.to_vec();
    }
    let negatives: Vec<(usize, bool)> = labeled.iter().copied().filter(|(_, y)| !*y).collect();
    let take = positives.len().min(negatives.len());
    let mut picked: Vec<usize> = index::sample(rng, negatives.len(), take).into_vec();
    picked.sort_unstable();
    let mut out = positives;
    out.extend(picked.into_iter().map(|i| negatives[i]));
    out
}
