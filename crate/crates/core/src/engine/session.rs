use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    ensemble_score, sample_prediction, select_training_set, EngineError, EnsembleWeights, Result,
    Strategy, StrategyKind,
};
use crate::classifier::{ClassifierConfig, ClassifierState, FeatureTable, ProbabilisticClassifier};
use crate::ranking::{rank_tiles, RankOrder, RankingSpec};
use crate::seeds::{self, Stream};
use crate::tilestore::{ensure_modality, Label, Tileset};

pub const RUN_LOG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct LabelerError(pub String);

/// Supplies labels for a batch of tile ids, in order.
pub trait Labeler {
    fn label(&mut self, ids: &[usize]) -> std::result::Result<Vec<bool>, LabelerError>;
}

/// Answers from stored ground truth.
#[derive(Debug, Clone)]
pub struct GroundTruthOracle {
    labels: Vec<Label>,
}

impl GroundTruthOracle {
    pub fn new(labels: Vec<Label>) -> Self {
        Self { labels }
    }

    pub fn from_tileset(tileset: &Tileset) -> Self {
        Self::new(tileset.labels())
    }
}

impl Labeler for GroundTruthOracle {
    fn label(&mut self, ids: &[usize]) -> std::result::Result<Vec<bool>, LabelerError> {
        ids.iter()
            .map(|&id| {
                self.labels
                    .get(id)
                    .and_then(|l| l.as_bool())
                    .ok_or_else(|| LabelerError(format!("no ground truth for tile {id}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Total labels the session may request.
    pub budget: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub classifier: ClassifierConfig,
}

impl SessionConfig {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self {
            budget,
            batch_size: 10,
            seed,
            classifier: ClassifierConfig::reference(),
        }
    }
}

/// Held-out tiles scored after every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSet {
    pub ids: Vec<usize>,
    pub labels: Vec<bool>,
}

/// Everything a session reads but never changes: per-model features, the
/// ranking over the whole tileset, the queryable pool and an optional test set.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub features: Vec<Arc<FeatureTable>>,
    pub rank: RankOrder,
    pub pool: Vec<usize>,
    pub test: Option<TestSet>,
}

impl SessionData {
    /// Builds features for each strategy modality (fusing if needed) and the
    /// default warmth ranking. `pool` defaults to every tile.
    pub fn prepare(
        tileset: &mut Tileset,
        strategy: &Strategy,
        classifier: &ClassifierConfig,
        pool: Option<Vec<usize>>,
        test: Option<TestSet>,
    ) -> Result<Self> {
        strategy.validate()?;
        let mut features = Vec::with_capacity(strategy.modalities.len());
        for &m in &strategy.modalities {
            ensure_modality(tileset, m)?;
            features.push(Arc::new(FeatureTable::build(
                tileset,
                m,
                classifier.pool_grid,
                None,
            )?));
        }
        let rank = rank_tiles(tileset, &RankingSpec::default())?;
        let pool = pool.unwrap_or_else(|| (0..tileset.len()).collect());
        Ok(Self {
            features,
            rank,
            pool,
            test,
        })
    }

    pub fn tile_count(&self) -> usize {
        self.rank.metrics.len()
    }

    fn validate(&self, models: usize) -> Result<()> {
        let n = self.tile_count();
        if self.features.len() != models {
            return Err(EngineError::InvalidSession(format!(
                "{} feature tables for {models} models",
                self.features.len()
            )));
        }
        if let Some(f) = self.features.iter().find(|f| f.len() != n) {
            return Err(EngineError::InvalidSession(format!(
                "feature table has {} rows, tileset {n}",
                f.len()
            )));
        }
        let mut seen = HashSet::new();
        for &id in &self.pool {
            if id >= n || !seen.insert(id) {
                return Err(EngineError::InvalidSession(format!(
                    "bad or repeated pool id {id}"
                )));
            }
        }
        if let Some(t) = &self.test {
            if t.ids.len() != t.labels.len() {
                return Err(EngineError::InvalidSession(
                    "test ids and labels differ in length".into(),
                ));
            }
            if let Some(&id) = t.ids.iter().find(|&&id| id >= n || seen.contains(&id)) {
                return Err(EngineError::InvalidSession(format!(
                    "test tile {id} is out of range or in the pool"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledTile {
    pub id: usize,
    pub label: bool,
    pub round: usize,
    /// Whether each model's thresholded prediction at query time matched.
    pub correct: Vec<bool>,
}

/// A batch chosen for the current round but not yet labeled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub round: usize,
    pub ids: Vec<usize>,
    /// Tiles scored during the ranked walk (0 for baselines).
    pub walk_length: usize,
    /// Tiles added from the top of the ranking after the walk ran out.
    pub padded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub queried_ids: Vec<usize>,
    pub labels: Vec<Label>,
    pub weights: Vec<f64>,
    pub correct_counts: Vec<u64>,
    pub walk_length: usize,
    pub padded: usize,
    pub positives_found: usize,
    pub labels_used: usize,
    pub training_set_size: usize,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub schema_version: u32,
    pub strategy: Strategy,
    pub seed: u64,
    pub budget: usize,
    pub batch_size: usize,
    pub pool_size: usize,
    pub rounds: Vec<RoundLog>,
}

impl RunLog {
    /// The canonical on-disk form shared by every writer of run logs.
    pub fn to_json_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("run logs always serialize");
        out.push(b'\n');
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundOutcome {
    Round(RoundLog),
    /// Budget spent or pool exhausted; nothing changed.
    Complete,
}

/// One active-learning run over a fixed pool.
pub struct ActiveSession {
    strategy: Strategy,
    config: SessionConfig,
    data: SessionData,
    /// Ranking restricted to the pool.
    order: RankOrder,
    classifiers: Vec<Box<dyn ProbabilisticClassifier>>,
    weights: EnsembleWeights,
    labeled: Vec<LabeledTile>,
    is_labeled: Vec<bool>,
    in_pool: Vec<bool>,
    rounds: Vec<RoundLog>,
}

impl ActiveSession {
    /// Session with the reference classifier per modality. Every model's
    /// initial weights come from the session seed, so two strategies run
    /// under one seed start from identical networks.
    pub fn new(strategy: Strategy, config: SessionConfig, data: SessionData) -> Result<Self> {
        let classifiers = data
            .features
            .iter()
            .enumerate()
            .map(|(m, f)| {
                let cfg = ClassifierConfig {
                    init_seed: seeds::derive(config.seed, 0, Stream::Init, m as u64),
                    ..config.classifier.clone()
                };
                ClassifierState::new(f.dim(), cfg)
                    .map(|c| Box::new(c) as Box<dyn ProbabilisticClassifier>)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::with_classifiers(strategy, config, data, classifiers)
    }

    pub fn with_classifiers(
        strategy: Strategy,
        config: SessionConfig,
        data: SessionData,
        classifiers: Vec<Box<dyn ProbabilisticClassifier>>,
    ) -> Result<Self> {
        strategy.validate()?;
        config.classifier.validate()?;
        if config.batch_size == 0 {
            return Err(EngineError::InvalidSession(
                "batch size must be positive".into(),
            ));
        }
        if classifiers.len() != strategy.modalities.len() {
            return Err(EngineError::InvalidSession(format!(
                "{} classifiers for {} modalities",
                classifiers.len(),
                strategy.modalities.len()
            )));
        }
        data.validate(classifiers.len())?;
        if config.budget > data.pool.len() {
            return Err(EngineError::InvalidSession(format!(
                "budget {} exceeds the {} unlabeled tiles in the pool",
                config.budget,
                data.pool.len()
            )));
        }
        let n = data.tile_count();
        let mut in_pool = vec![false; n];
        for &id in &data.pool {
            in_pool[id] = true;
        }
        let order = data.rank.restricted_to(&in_pool);
        let in_pool = in_pool;
        let weights = EnsembleWeights::uniform(classifiers.len());
        Ok(Self {
            strategy,
            config,
            data,
            order,
            classifiers,
            weights,
            labeled: Vec::new(),
            is_labeled: vec![false; n],
            in_pool,
            rounds: Vec::new(),
        })
    }

    pub fn strategy(&self) -> &Strategy {
        &self.strategy
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn data(&self) -> &SessionData {
        &self.data
    }

    pub fn weights(&self) -> &EnsembleWeights {
        &self.weights
    }

    pub fn labeled(&self) -> &[LabeledTile] {
        &self.labeled
    }

    pub fn rounds(&self) -> &[RoundLog] {
        &self.rounds
    }

    pub fn round(&self) -> usize {
        self.rounds.len()
    }

    pub fn labels_used(&self) -> usize {
        self.labeled.len()
    }

    pub fn positives_found(&self) -> usize {
        self.labeled.iter().filter(|l| l.label).count()
    }

    pub fn remaining_budget(&self) -> usize {
        self.config.budget - self.labeled.len()
    }

    pub fn unlabeled_in_pool(&self) -> usize {
        self.data.pool.len() - self.labeled.len()
    }

    pub fn is_complete(&self) -> bool {
        self.remaining_budget() == 0 || self.unlabeled_in_pool() == 0
    }

    pub fn classifiers(&self) -> &[Box<dyn ProbabilisticClassifier>] {
        &self.classifiers
    }

    /// Each model's positive probability for `id`.
    pub fn outputs(&self, id: usize) -> Vec<f64> {
        self.classifiers
            .iter()
            .zip(&self.data.features)
            .map(|(c, f)| c.predict_proba(f.row(id)))
            .collect()
    }

    /// Weighted positive score for `id`.
    pub fn score(&self, id: usize) -> f64 {
        let out = self.outputs(id);
        ensemble_score(&out, &self.weights.weights)
            .map(|s| s.positive)
            .unwrap_or(f64::NAN)
    }

    pub fn predict(&self, id: usize) -> bool {
        self.score(id) >= self.config.classifier.decision_threshold
    }

    pub fn scores(&self) -> Vec<f64> {
        (0..self.data.tile_count())
            .map(|id| self.score(id))
            .collect()
    }

    /// Accuracy of the weighted prediction on the test set, if there is one.
    pub fn test_accuracy(&self) -> Option<f64> {
        let t = self.data.test.as_ref()?;
        if t.ids.is_empty() {
            return None;
        }
        let hits = t
            .ids
            .iter()
            .zip(&t.labels)
            .filter(|(&id, &y)| self.predict(id) == y)
            .count();
        Some(hits as f64 / t.ids.len() as f64)
    }

    /// The batch for the current round. Pure: the same state always yields
    /// the same plan. Empty when the session is complete.
    pub fn next_batch(&self) -> BatchPlan {
        let round = self.round();
        let size = self
            .config
            .batch_size
            .min(self.remaining_budget())
            .min(self.unlabeled_in_pool());
        if size == 0 {
            return BatchPlan {
                round,
                ids: Vec::new(),
                walk_length: 0,
                padded: 0,
            };
        }
        if self.strategy.kind.uses_ranking() {
            self.assemble(round, size)
        } else {
            BatchPlan {
                round,
                ids: self.baseline(round, size),
                walk_length: 0,
                padded: 0,
            }
        }
    }

    fn assemble(&self, round: usize, size: usize) -> BatchPlan {
        let mut rng = seeds::rng(self.config.seed, round as u64, Stream::Assemble, 0);
        let mut ids = Vec::with_capacity(size);
        let mut taken = vec![false; self.is_labeled.len()];
        let mut walk_length = 0;
        for &id in &self.order.ids {
            if self.is_labeled[id] {
                continue;
            }
            walk_length += 1;
            let out = self.outputs(id);
            let score = ensemble_score(&out, &self.weights.weights).expect("weights match models");
            if sample_prediction(score, &mut rng) {
                ids.push(id);
                taken[id] = true;
                if ids.len() == size {
                    break;
                }
            }
        }
        let mut padded = 0;
        if ids.len() < size {
            for &id in &self.order.ids {
                if ids.len() == size {
                    break;
                }
                if !self.is_labeled[id] && !taken[id] {
                    ids.push(id);
                    taken[id] = true;
                    padded += 1;
                }
            }
        }
        BatchPlan {
            round,
            ids,
            walk_length,
            padded,
        }
    }

    fn baseline(&self, round: usize, size: usize) -> Vec<usize> {
        let mut candidates: Vec<usize> = self
            .data
            .pool
            .iter()
            .copied()
            .filter(|&id| !self.is_labeled[id])
            .collect();
        candidates.sort_unstable();
        if self.strategy.kind == StrategyKind::Random {
            let mut rng = seeds::rng(self.config.seed, round as u64, Stream::BaselineRandom, 0);
            let mut picks = index::sample(&mut rng, candidates.len(), size).into_vec();
            picks.sort_unstable();
            return picks.into_iter().map(|i| candidates[i]).collect();
        }
        let mut keyed: Vec<(f64, usize)> = candidates
            .into_iter()
            .map(|id| {
                let out = self.outputs(id);
                let key = match self.strategy.kind {
                    StrategyKind::Uncertainty => (self.score(id) - 0.5).abs(),
                    StrategyKind::PositiveCertainty => 1.0 - self.score(id),
                    StrategyKind::Disagree => {
                        let mut spread = 0.0f64;
                        for i in 0..out.len() {
                            for j in i + 1..out.len() {
                                spread = spread.max((out[i] - out[j]).abs());
                            }
                        }
                        -spread
                    }
                    _ => unreachable!("ranked strategies do not use baselines"),
                };
                (key, id)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().take(size).map(|(_, id)| id).collect()
    }

    /// Applies labels for `plan`, updates weights and retrains every model
    /// from its initial weights. Either the whole round applies or nothing
    /// changes.
    pub fn complete_round(&mut self, plan: &BatchPlan, labels: &[bool]) -> Result<&RoundLog> {
        let round = self.round();
        if plan.round != round {
            return Err(EngineError::BatchMismatch(format!(
                "batch is for round {}, session is at {round}",
                plan.round
            )));
        }
        if plan.ids.is_empty() {
            return Err(EngineError::BatchMismatch("empty batch".into()));
        }
        if plan.ids.len() != labels.len() {
            return Err(EngineError::BatchMismatch(format!(
                "{} ids but {} labels",
                plan.ids.len(),
                labels.len()
            )));
        }
        if plan.ids.len() > self.remaining_budget() {
            return Err(EngineError::BatchMismatch(
                "batch exceeds the remaining budget".into(),
            ));
        }
        let mut seen = HashSet::new();
        for &id in &plan.ids {
            if id >= self.is_labeled.len() || !self.in_pool[id] {
                return Err(EngineError::BatchMismatch(format!(
                    "tile {id} is not in the pool"
                )));
            }
            if self.is_labeled[id] || !seen.insert(id) {
                return Err(EngineError::BatchMismatch(format!(
                    "tile {id} is already labeled"
                )));
            }
        }

        // Correctness is judged against the models that chose this batch.
        let new_entries: Vec<LabeledTile> = plan
            .ids
            .iter()
            .zip(labels)
            .map(|(&id, &label)| LabeledTile {
                id,
                label,
                round,
                correct: self
                    .classifiers
                    .iter()
                    .zip(&self.data.features)
                    .map(|(c, f)| c.classify(f.row(id)) == label)
                    .collect(),
            })
            .collect();
        let mut labeled = self.labeled.clone();
        labeled.extend(new_entries);
        let counts: Vec<u64> = (0..self.classifiers.len())
            .map(|m| labeled.iter().filter(|l| l.correct[m]).count() as u64)
            .collect();
        let weights = EnsembleWeights::from_counts(counts, &self.weights);

        let pairs: Vec<(usize, bool)> = labeled.iter().map(|l| (l.id, l.label)).collect();
        let mut rng = seeds::rng(self.config.seed, round as u64, Stream::TrainingSelection, 0);
        let training = select_training_set(&pairs, &mut rng);
        let ys: Vec<bool> = training.iter().map(|t| t.1).collect();
        let mut trained = Vec::with_capacity(self.classifiers.len());
        for (m, (c, f)) in self.classifiers.iter().zip(&self.data.features).enumerate() {
            let mut model = c.boxed_clone();
            model.reset();
            let xs: Vec<&[f32]> = training.iter().map(|t| f.row(t.0)).collect();
            model.train(
                &xs,
                &ys,
                seeds::derive(self.config.seed, round as u64, Stream::Shuffle, m as u64),
            )?;
            trained.push(model);
        }

        // Commit.
        for &id in &plan.ids {
            self.is_labeled[id] = true;
        }
        self.labeled = labeled;
        self.weights = weights;
        self.classifiers = trained;
        let log = RoundLog {
            round,
            queried_ids: plan.ids.clone(),
            labels: labels.iter().map(|&y| Label::from_bool(y)).collect(),
            weights: self.weights.weights.clone(),
            correct_counts: self.weights.correct.clone(),
            walk_length: plan.walk_length,
            padded: plan.padded,
            positives_found: self.positives_found(),
            labels_used: self.labeled.len(),
            training_set_size: training.len(),
            test_accuracy: self.test_accuracy(),
        };
        self.rounds.push(log);
        Ok(self.rounds.last().expect("just pushed"))
    }

    /// Plans a batch, asks `labeler` and completes the round. A failing
    /// labeler leaves the session untouched.
    pub fn run_round(&mut self, labeler: &mut dyn Labeler) -> Result<RoundOutcome> {
        if self.is_complete() {
            return Ok(RoundOutcome::Complete);
        }
        let plan = self.next_batch();
        let labels = labeler.label(&plan.ids)?;
        self.complete_round(&plan, &labels)
            .map(|l| RoundOutcome::Round(l.clone()))
    }

    /// Runs rounds until the budget or pool is exhausted.
    pub fn run(&mut self, labeler: &mut dyn Labeler) -> Result<RunLog> {
        while let RoundOutcome::Round(_) = self.run_round(labeler)? {}
        Ok(self.run_log())
    }

    pub fn run_log(&self) -> RunLog {
        RunLog {
            schema_version: RUN_LOG_SCHEMA_VERSION,
            strategy: self.strategy.clone(),
            seed: self.config.seed,
            budget: self.config.budget,
            batch_size: self.config.batch_size,
            pool_size: self.data.pool.len(),
            rounds: self.rounds.clone(),
        }
    }
}

impl std::fmt::Debug for ActiveSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ActiveSession")
            .field("strategy", &self.strategy)
            .field("config", &self.config)
            .field("round", &self.round())
            .field("labels_used", &self.labels_used())
            .finish_non_exhaustive()
    }
}
