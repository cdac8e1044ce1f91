//! Passive reference protocol, the active-learning benchmark, metrics,
//! multi-trial aggregation and labeling-time accounting.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::classifier::{ClassifierConfig, ClassifierState, FeatureTable, ProbabilisticClassifier};
use crate::engine::{
    ActiveSession, EngineError, GroundTruthOracle, SessionConfig, SessionData, Strategy, TestSet,
};
use crate::ranking::{rank_tiles, RankOrder, RankingSpec};
use crate::seeds::{self, Stream};
use crate::tilestore::{ensure_modality, Label, Modality, Tileset};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("split needs at least {needed} {what}, found {found}")]
    TooFew {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("tile {0} has no ground-truth label")]
    Unlabeled(usize),
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("modality {0} was not prepared for this experiment")]
    MissingFeatures(Modality),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Classifier(#[from] crate::classifier::ClassifierError),
    #[error(transparent)]
    Ranking(#[from] crate::ranking::RankingError),
    #[error(transparent)]
    Tilestore(#[from] crate::tilestore::TilestoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub positive_train_fraction: f64,
    /// Passive mode draws as many train negatives as train positives;
    /// active mode keeps every negative not set aside for testing.
    pub balance_train: bool,
    pub seed: u64,
}

impl SplitSpec {
    pub fn passive(seed: u64) -> Self {
        Self {
            positive_train_fraction: 0.8,
            balance_train: true,
            seed,
        }
    }

    pub fn active(seed: u64) -> Self {
        Self {
            positive_train_fraction: 0.8,
            balance_train: false,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub test_labels: Vec<bool>,
}

impl Split {
    pub fn test_set(&self) -> TestSet {
        TestSet {
            ids: self.test.clone(),
            labels: self.test_labels.clone(),
        }
    }
}

pub fn make_split(tileset: &Tileset, spec: &SplitSpec) -> Result<Split> {
    split_labels(&tileset.labels(), spec)
}

/// `floor(fraction * P)` positives train, the rest test against an equal
/// number of negatives. Ids within each set are sorted.
pub fn split_labels(labels: &[Label], spec: &SplitSpec) -> Result<Split> {
    if !(spec.positive_train_fraction > 0.0 && spec.positive_train_fraction < 1.0) {
        return Err(ExperimentError::InvalidConfig(format!(
            "positive_train_fraction must be in (0,1), got {}",
            spec.positive_train_fraction
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (id, l) in labels.iter().enumerate() {
        match l.as_bool() {
            Some(true) => pos.push(id),
            Some(false) => neg.push(id),
            None => return Err(ExperimentError::Unlabeled(id)),
        }
    }
    let train_pos = (spec.positive_train_fraction * pos.len() as f64).floor() as usize;
    let test_pos = pos.len() - train_pos;
    if train_pos == 0 || test_pos == 0 {
        return Err(ExperimentError::TooFew {
            what: "positives",
            needed: 2,
            found: pos.len(),
        });
    }
    let needed_neg = test_pos + if spec.balance_train { train_pos } else { 0 };
    if neg.len() < needed_neg {
        return Err(ExperimentError::TooFew {
            what: "negatives",
            needed: needed_neg,
            found: neg.len(),
        });
    }
    let mut rng = seeds::rng(spec.seed, 0, Stream::Split, 0);
    pos.shuffle(&mut rng);
    let neg_pick = index::sample(&mut rng, neg.len(), needed_neg).into_vec();
    let mut test_neg_mask = vec![false; neg.len()];
    for &i in &neg_pick[..test_pos] {
        test_neg_mask[i] = true;
    }
    let train_neg: Vec<usize> = if spec.balance_train {
        neg_pick[test_pos..].iter().map(|&i| neg[i]).collect()
    } else {
        neg.iter()
            .enumerate()
            .filter(|(i, _)| !test_neg_mask[*i])
            .map(|(_, &id)| id)
            .collect()
    };

    let mut train: Vec<usize> = pos[..train_pos].iter().copied().chain(train_neg).collect();
    train.sort_unstable();
    let mut test: Vec<usize> = pos[train_pos..]
        .iter()
        .copied()
        .chain(neg_pick[..test_pos].iter().map(|&i| neg[i]))
        .collect();
    test.sort_unstable();
    let test_labels = test
        .iter()
        .map(|&id| labels[id] == Label::Positive)
        .collect();
    Ok(Split {
        train,
        test,
        test_labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    /// `None` when nothing was predicted positive.
    pub precision: Option<f64>,
    /// `None` when there are no positives.
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

pub fn confusion_metrics(predictions: &[bool], labels: &[bool]) -> Result<ConfusionMetrics> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(ExperimentError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &y) in predictions.iter().zip(labels) {
        match (p, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(ConfusionMetrics {
        tp,
        fp,
        fn_,
        tn,
        accuracy: (tp + tn) as f64 / labels.len() as f64,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

/// Labels, features and ranking shared by every trial on one tileset.
#[derive(Debug, Clone)]
pub struct ExperimentContext {
    pub labels: Vec<Label>,
    pub features: BTreeMap<Modality, Arc<FeatureTable>>,
    pub rank: RankOrder,
    pub classifier: ClassifierConfig,
}

impl ExperimentContext {
    pub fn new(
        tileset: &mut Tileset,
        modalities: &[Modality],
        classifier: ClassifierConfig,
    ) -> Result<Self> {
        classifier.validate()?;
        let mut features = BTreeMap::new();
        for &m in modalities {
            ensure_modality(tileset, m)?;
            features.insert(
                m,
                Arc::new(FeatureTable::build(tileset, m, classifier.pool_grid, None)?),
            );
        }
        Ok(Self {
            labels: tileset.labels(),
            features,
            rank: rank_tiles(tileset, &RankingSpec::default())?,
            classifier,
        })
    }

    pub fn features(&self, m: Modality) -> Result<&Arc<FeatureTable>> {
        self.features
            .get(&m)
            .ok_or(ExperimentError::MissingFeatures(m))
    }

    pub fn positive_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| **l == Label::Positive)
            .count()
    }

    pub fn base_rate(&self) -> f64 {
        self.positive_count() as f64 / self.labels.len().max(1) as f64
    }

    fn session_data(&self, strategy: &Strategy, split: &Split) -> Result<SessionData> {
        let features = strategy
            .modalities
            .iter()
            .map(|&m| self.features(m).cloned())
            .collect::<Result<Vec<_>>>()?;
        Ok(SessionData {
            features,
            rank: self.rank.clone(),
            pool: split.train.clone(),
            test: Some(split.test_set()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub labels_used: usize,
    pub accuracy: Option<f64>,
    pub positives_found: usize,
    /// Positives found over positives available in the train pool.
    pub found_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub strategy: String,
    pub seed: u64,
    pub learning_rate: f64,
    pub train_size: usize,
    pub train_positives: usize,
    pub metrics: ConfusionMetrics,
    pub curve: Vec<CurvePoint>,
    /// Positives among queried tiles over tiles queried (active runs only).
    pub queried_positive_rate: Option<f64>,
}

/// Trains one model on a balanced split and scores the balanced test set.
pub fn run_passive_trial(
    ctx: &ExperimentContext,
    modality: Modality,
    seed: u64,
) -> Result<TrialResult> {
    let split = split_labels(&ctx.labels, &SplitSpec::passive(seed))?;
    let features = ctx.features(modality)?;
    let cfg = ClassifierConfig {
        init_seed: seeds::derive(seed, 0, Stream::Init, 0),
        ..ctx.classifier.clone()
    };
    let mut model = ClassifierState::new(features.dim(), cfg)?;
    let ys: Vec<bool> = split
        .train
        .iter()
        .map(|&id| ctx.labels[id] == Label::Positive)
        .collect();
    model.train(
        &features.rows(&split.train),
        &ys,
        seeds::derive(seed, 0, Stream::Shuffle, 0),
    )?;
    let preds: Vec<bool> = split
        .test
        .iter()
        .map(|&id| model.classify(features.row(id)))
        .collect();
    let metrics = confusion_metrics(&preds, &split.test_labels)?;
    let train_positives = ys.iter().filter(|y| **y).count();
    Ok(TrialResult {
        strategy: format!("passive[{modality}]"),
        seed,
        learning_rate: ctx.classifier.learning_rate,
        train_size: split.train.len(),
        train_positives,
        metrics,
        curve: vec![CurvePoint {
            labels_used: split.train.len(),
            accuracy: Some(metrics.accuracy),
            positives_found: train_positives,
            found_fraction: 1.0,
        }],
        queried_positive_rate: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub budget: usize,
    pub batch_size: usize,
    pub checkpoints: Vec<usize>,
    pub trials: usize,
    pub base_seed: u64,
}

impl BenchmarkConfig {
    /// Checkpoints every `every` labels up to `budget`.
    pub fn new(budget: usize, every: usize, trials: usize, base_seed: u64) -> Self {
        let checkpoints = (1..=budget / every.max(1)).map(|i| i * every).collect();
        Self {
            budget,
            batch_size: 10,
            checkpoints,
            trials,
            base_seed,
        }
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        self.base_seed.wrapping_add(trial as u64)
    }
}

/// Pool and optional held-out test set for a session over `labels`: the
/// active split when evaluating, otherwise every tile.
pub fn session_inputs(
    labels: &[Label],
    evaluate: bool,
    seed: u64,
) -> Result<(Vec<usize>, Option<TestSet>)> {
    if evaluate {
        let split = split_labels(labels, &SplitSpec::active(seed))?;
        let test = split.test_set();
        Ok((split.train, Some(test)))
    } else {
        Ok(((0..labels.len()).collect(), None))
    }
}

/// One active session on the split for `seed`, labeled by ground truth.
pub fn run_active_trial(
    ctx: &ExperimentContext,
    strategy: &Strategy,
    config: &BenchmarkConfig,
    seed: u64,
) -> Result<TrialResult> {
    let split = split_labels(&ctx.labels, &SplitSpec::active(seed))?;
    let data = ctx.session_data(strategy, &split)?;
    let budget = config.budget.min(split.train.len());
    let session_config = SessionConfig {
        budget,
        batch_size: config.batch_size,
        seed,
        classifier: ctx.classifier.clone(),
    };
    let mut session = ActiveSession::new(strategy.clone(), session_config, data)?;
    let mut oracle = GroundTruthOracle::new(ctx.labels.clone());
    let log = session.run(&mut oracle)?;
    let train_positives = split
        .train
        .iter()
        .filter(|&&id| ctx.labels[id] == Label::Positive)
        .count();
    let curve = config
        .checkpoints
        .iter()
        .filter_map(|&c| log.rounds.iter().find(|r| r.labels_used >= c))
        .map(|r| CurvePoint {
            labels_used: r.labels_used,
            accuracy: r.test_accuracy,
            positives_found: r.positives_found,
            found_fraction: r.positives_found as f64 / train_positives.max(1) as f64,
        })
        .collect();
    let test = split.test_set();
    let preds: Vec<bool> = test.ids.iter().map(|&id| session.predict(id)).collect();
    let metrics = confusion_metrics(&preds, &test.labels)?;
    let used = session.labels_used();
    Ok(TrialResult {
        strategy: strategy.label(),
        seed,
        learning_rate: ctx.classifier.learning_rate,
        train_size: split.train.len(),
        train_positives,
        metrics,
        curve,
        queried_positive_rate: (used > 0).then(|| session.positives_found() as f64 / used as f64),
    })
}

/// Every strategy on every trial seed. Results are ordered by strategy,
/// then seed, regardless of scheduling.
pub fn run_active_benchmark(
    ctx: &ExperimentContext,
    strategies: &[Strategy],
    config: &BenchmarkConfig,
) -> Result<Vec<TrialResult>> {
    let jobs: Vec<(usize, u64)> = (0..strategies.len())
        .flat_map(|s| (0..config.trials).map(move |t| (s, config.trial_seed(t))))
        .collect();
    jobs.par_iter()
        .map(|&(s, seed)| run_active_trial(ctx, &strategies[s], config, seed))
        .collect()
}

pub fn run_passive_benchmark(
    ctx: &ExperimentContext,
    modalities: &[Modality],
    trials: usize,
    base_seed: u64,
) -> Result<Vec<TrialResult>> {
    let jobs: Vec<(Modality, u64)> = modalities
        .iter()
        .flat_map(|&m| (0..trials).map(move |t| (m, base_seed.wrapping_add(t as u64))))
        .collect();
    jobs.par_iter()
        .map(|&(m, seed)| run_passive_trial(ctx, m, seed))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; `None` below two values.
    pub sem: Option<f64>,
    pub n: usize,
    /// Values left out because they were undefined.
    pub excluded: usize,
}

pub fn summarize(values: &[Option<f64>]) -> Option<Summary> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    let n = present.len();
    if n == 0 {
        return None;
    }
    let mean = present.iter().sum::<f64>() / n as f64;
    let sem = (n > 1).then(|| {
        let var = present.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt() / (n as f64).sqrt()
    });
    Some(Summary {
        mean,
        sem,
        n,
        excluded: values.len() - n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub strategy: String,
    pub budget: usize,
    pub accuracy: Option<Summary>,
    pub found: Option<Summary>,
}

/// Mean and standard error per strategy and curve budget.
pub fn aggregate(trials: &[TrialResult]) -> Vec<AggregateRow> {
    type Columns = (Vec<Option<f64>>, Vec<Option<f64>>);
    let mut groups: BTreeMap<(String, usize), Columns> = BTreeMap::new();
    for t in trials {
        for p in &t.curve {
            let e = groups
                .entry((t.strategy.clone(), p.labels_used))
                .or_default();
            e.0.push(p.accuracy);
            e.1.push(Some(p.found_fraction));
        }
    }
    groups
        .into_iter()
        .map(|((strategy, budget), (acc, found))| AggregateRow {
            strategy,
            budget,
            accuracy: summarize(&acc),
            found: summarize(&found),
        })
        .collect()
}

/// Summary of each final test metric for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub strategy: String,
    pub accuracy: Option<Summary>,
    pub precision: Option<Summary>,
    pub recall: Option<Summary>,
    pub f1: Option<Summary>,
}

pub fn summarize_metrics(trials: &[TrialResult]) -> Vec<MetricsSummary> {
    let mut groups: BTreeMap<&str, Vec<&ConfusionMetrics>> = BTreeMap::new();
    for t in trials {
        groups.entry(&t.strategy).or_default().push(&t.metrics);
    }
    groups
        .into_iter()
        .map(|(s, ms)| MetricsSummary {
            strategy: s.to_string(),
            accuracy: summarize(&ms.iter().map(|m| Some(m.accuracy)).collect::<Vec<_>>()),
            precision: summarize(&ms.iter().map(|m| m.precision).collect::<Vec<_>>()),
            recall: summarize(&ms.iter().map(|m| m.recall).collect::<Vec<_>>()),
            f1: summarize(&ms.iter().map(|m| m.f1).collect::<Vec<_>>()),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub a: String,
    pub b: String,
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

/// Two-sided Welch two-sample t-test.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Option<(f64, f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (na, ma, va) = stats(a);
    let (nb, mb, vb) = stats(b);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let p = if ma == mb { 1.0 } else { 0.0 };
        return Some((
            if ma == mb {
                0.0
            } else {
                f64::INFINITY.copysign(ma - mb)
            },
            na + nb - 2.0,
            p,
        ));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some((t, df, 2.0 * (1.0 - dist.cdf(t.abs()))))
}

/// Pairwise tests on final test accuracy between strategies.
pub fn pairwise_significance(trials: &[TrialResult]) -> Vec<Significance> {
    let mut groups: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for t in trials {
        groups
            .entry(&t.strategy)
            .or_default()
            .push(t.metrics.accuracy);
    }
    let names: Vec<&str> = groups.keys().copied().collect();
    let mut out = Vec::new();
    for i in 0..names.len() {
        for j in i + 1..names.len() {
            if let Some((t, df, p_value)) = welch_t_test(&groups[names[i]], &groups[names[j]]) {
                out.push(Significance {
                    a: names[i].into(),
                    b: names[j].into(),
                    t,
                    df,
                    p_value,
                });
            }
        }
    }
    out
}

pub fn write_raw_trials(path: impl AsRef<Path>, trials: &[TrialResult]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trials {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_trials(path: impl AsRef<Path>) -> Result<Vec<TrialResult>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(ExperimentError::from))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn write_aggregate_csv(path: impl AsRef<Path>, rows: &[AggregateRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "strategy",
        "budget",
        "mean_acc",
        "sem_acc",
        "mean_found",
        "sem_found",
        "n",
    ])?;
    for r in rows {
        w.write_record([
            r.strategy.clone(),
            r.budget.to_string(),
            opt(r.accuracy.map(|s| s.mean)),
            opt(r.accuracy.and_then(|s| s.sem)),
            opt(r.found.map(|s| s.mean)),
            opt(r.found.and_then(|s| s.sem)),
            r.accuracy.or(r.found).map(|s| s.n).unwrap_or(0).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format per-trial curve points for plotting.
pub fn write_curves_csv(path: impl AsRef<Path>, trials: &[TrialResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "strategy",
        "seed",
        "labels_used",
        "accuracy",
        "positives_found",
        "found_fraction",
    ])?;
    for t in trials {
        for p in &t.curve {
            w.write_record([
                t.strategy.clone(),
                t.seed.to_string(),
                p.labels_used.to_string(),
                opt(p.accuracy),
                p.positives_found.to_string(),
                p.found_fraction.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Annotator time for a number of labels, in whole seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelingTime {
    pub seconds: u64,
}

pub const SECONDS_PER_LABEL: u64 = 30;

pub fn labeling_time(labels: u64, seconds_per_label: u64) -> LabelingTime {
    LabelingTime {
        seconds: labels * seconds_per_label,
    }
}

impl LabelingTime {
    /// Nearest whole hour.
    pub fn hours(self) -> u64 {
        (self.seconds + 1800) / 3600
    }

    /// Nearest whole minute.
    pub fn minutes(self) -> u64 {
        (self.seconds + 30) / 60
    }
}

impl fmt::Display for LabelingTime {
    /// Hours from ten hours up, minutes below.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.seconds >= 10 * 3600 {
            write!(f, "{} hours", self.hours())
        } else {
            write!(f, "{} mins", self.minutes())
        }
    }
}
