use std::collections::{HashMap, HashSet};

use rarequery_core::classifier::{
    ClassifierConfig, ClassifierError, ProbabilisticClassifier, TrainReport,
};
use rarequery_core::engine::*;
use rarequery_core::tilestore::synth::{synthetic_tileset, SiteConfig};
use rarequery_core::tilestore::{Band, Label, Modality, Tileset};

fn small_site(seed: u64) -> Tileset {
    let cfg = SiteConfig {
        seed,
        extent_m: 120.0,
        positive_count: 2,
        bands: vec![Band::Thermal, Band::Rgb],
        ..SiteConfig::default()
    };
    synthetic_tileset(&cfg).unwrap().0
}

fn single() -> Strategy {
    Strategy::new(StrategyKind::MultimodalSingle, vec![Modality::THERMAL]).unwrap()
}

fn session(ts: &mut Tileset, strategy: Strategy, budget: usize, seed: u64) -> ActiveSession {
    let cfg = SessionConfig::new(budget, seed);
    let data = SessionData::prepare(ts, &strategy, &cfg.classifier, None, None).unwrap();
    ActiveSession::new(strategy, cfg, data).unwrap()
}

#[derive(Clone)]
struct Constant(f64);

impl ProbabilisticClassifier for Constant {
    fn predict_proba(&self, _: &[f32]) -> f64 {
        self.0
    }
    fn train(
        &mut self,
        _: &[&[f32]],
        _: &[bool],
        _: u64,
    ) -> std::result::Result<TrainReport, ClassifierError> {
        Ok(TrainReport {
            steps: 0,
            initial_loss: 0.0,
            final_loss: 0.0,
        })
    }
    fn reset(&mut self) {}
    fn boxed_clone(&self) -> Box<dyn ProbabilisticClassifier> {
        Box::new(self.clone())
    }
}

/// Knows the true label of every feature row it has been shown.
#[derive(Clone)]
struct Lookup(HashMap<Vec<u32>, bool>);

impl Lookup {
    fn new(data: &SessionData, model: usize, labels: &[Label]) -> Self {
        let f = &data.features[model];
        Self(
            (0..labels.len())
                .map(|i| {
                    (
                        f.row(i).iter().map(|v| v.to_bits()).collect(),
                        labels[i] == Label::Positive,
                    )
                })
                .collect(),
        )
    }
}

impl ProbabilisticClassifier for Lookup {
    fn predict_proba(&self, x: &[f32]) -> f64 {
        let key: Vec<u32> = x.iter().map(|v| v.to_bits()).collect();
        if self.0[&key] {
            1.0
        } else {
            0.0
        }
    }
    fn train(
        &mut self,
        _: &[&[f32]],
        _: &[bool],
        _: u64,
    ) -> std::result::Result<TrainReport, ClassifierError> {
        Ok(TrainReport {
            steps: 0,
            initial_loss: 0.0,
            final_loss: 0.0,
        })
    }
    fn reset(&mut self) {}
    fn boxed_clone(&self) -> Box<dyn ProbabilisticClassifier> {
        Box::new(self.clone())
    }
}

struct Failing;

impl Labeler for Failing {
    fn label(&mut self, _: &[usize]) -> std::result::Result<Vec<bool>, LabelerError> {
        Err(LabelerError("annotator went home".into()))
    }
}

#[test]
fn same_seed_gives_identical_run_logs() {
    let mut ts = small_site(3);
    let oracle = GroundTruthOracle::from_tileset(&ts);
    let a = session(&mut ts, single(), 40, 11)
        .run(&mut oracle.clone())
        .unwrap();
    let b = session(&mut ts, single(), 40, 11)
        .run(&mut oracle.clone())
        .unwrap();
    assert_eq!(
        serde_json::to_vec(&a).unwrap(),
        serde_json::to_vec(&b).unwrap()
    );
}

#[test]
fn budget_respected_and_tiles_labeled_once() {
    let mut ts = small_site(4);
    let mut s = session(&mut ts, single(), 55, 2);
    let log = s.run(&mut GroundTruthOracle::from_tileset(&ts)).unwrap();
    assert_eq!(s.labels_used(), 55);
    assert_eq!(log.rounds.len(), 6);
    assert_eq!(log.rounds.last().unwrap().queried_ids.len(), 5);
    let ids: Vec<usize> = log
        .rounds
        .iter()
        .flat_map(|r| r.queried_ids.clone())
        .collect();
    assert_eq!(ids.iter().collect::<HashSet<_>>().len(), ids.len());
    let mut found = 0;
    for r in &log.rounds {
        assert!(r.positives_found >= found);
        found = r.positives_found;
    }
    assert!(s.is_complete());
    assert!(matches!(
        s.run_round(&mut GroundTruthOracle::from_tileset(&ts))
            .unwrap(),
        RoundOutcome::Complete
    ));
}

#[test]
fn weights_are_normalised_correct_counts() {
    let mut ts = small_site(5);
    let strategy = Strategy::new(
        StrategyKind::MultimodalEnsemble,
        vec![Modality::THERMAL, Modality::RGB],
    )
    .unwrap();
    let mut s = session(&mut ts, strategy, 60, 9);
    assert_eq!(s.weights().weights, vec![0.5, 0.5]);
    let mut oracle = GroundTruthOracle::from_tileset(&ts);
    while let RoundOutcome::Round(r) = s.run_round(&mut oracle).unwrap() {
        let per_model: Vec<u64> = (0..2)
            .map(|m| s.labeled().iter().filter(|l| l.correct[m]).count() as u64)
            .collect();
        assert_eq!(r.correct_counts, per_model);
        let total: u64 = per_model.iter().sum();
        let ratios = s.weights().ratios();
        assert_eq!(
            ratios
                .iter()
                .fold(num_rational::Ratio::from_integer(0u64), |a, b| a + b),
            1u64.into()
        );
        for (w, c) in r.weights.iter().zip(&per_model) {
            assert_eq!(*w, *c as f64 / total as f64);
        }
    }
}

#[test]
fn perfect_model_outweighs_chance_model() {
    let mut ts = small_site(6);
    let labels = ts.labels();
    let strategy = Strategy::new(
        StrategyKind::MultimodalEnsemble,
        vec![Modality::THERMAL, Modality::RGB],
    )
    .unwrap();
    let cfg = SessionConfig {
        batch_size: 30,
        ..SessionConfig::new(30, 1)
    };
    let data = SessionData::prepare(&mut ts, &strategy, &cfg.classifier, None, None).unwrap();
    // Always "negative": right only on the negatives of the batch.
    let models: Vec<Box<dyn ProbabilisticClassifier>> = vec![
        Box::new(Lookup::new(&data, 0, &labels)),
        Box::new(Constant(0.4)),
    ];
    let mut s = ActiveSession::with_classifiers(strategy, cfg, data, models).unwrap();
    s.run_round(&mut GroundTruthOracle::new(labels)).unwrap();
    assert!(s.weights().weights[0] > 0.5, "{:?}", s.weights());
}

#[test]
fn certain_positive_model_takes_top_of_ranking() {
    let mut ts = small_site(7);
    let strategy = single();
    let cfg = SessionConfig::new(30, 0);
    let data = SessionData::prepare(&mut ts, &strategy, &cfg.classifier, None, None).unwrap();
    let top: Vec<usize> = data.rank.ids[..10].to_vec();
    let s = ActiveSession::with_classifiers(
        strategy.clone(),
        cfg.clone(),
        data.clone(),
        vec![Box::new(Constant(1.0))],
    )
    .unwrap();
    let plan = s.next_batch();
    assert_eq!(plan.ids, top);
    assert_eq!((plan.walk_length, plan.padded), (10, 0));

    // A model that never says positive walks the whole pool, then pads from the top.
    let s =
        ActiveSession::with_classifiers(strategy, cfg, data.clone(), vec![Box::new(Constant(0.0))])
            .unwrap();
    let plan = s.next_batch();
    assert_eq!(plan.ids, top);
    assert_eq!((plan.walk_length, plan.padded), (data.pool.len(), 10));
}

#[test]
fn next_batch_is_repeatable() {
    let mut ts = small_site(8);
    let mut s = session(&mut ts, single(), 30, 4);
    s.run_round(&mut GroundTruthOracle::from_tileset(&ts))
        .unwrap();
    assert_eq!(s.next_batch(), s.next_batch());
}

#[test]
fn failing_labeler_changes_nothing() {
    let mut ts = small_site(9);
    let mut s = session(&mut ts, single(), 30, 4);
    s.run_round(&mut GroundTruthOracle::from_tileset(&ts))
        .unwrap();
    let before = (
        serde_json::to_string(&s.run_log()).unwrap(),
        s.next_batch(),
        s.weights().clone(),
    );
    assert!(matches!(
        s.run_round(&mut Failing),
        Err(EngineError::Labeler(_))
    ));
    let after = (
        serde_json::to_string(&s.run_log()).unwrap(),
        s.next_batch(),
        s.weights().clone(),
    );
    assert_eq!(before, after);
}

#[test]
fn mismatched_submissions_rejected() {
    let mut ts = small_site(10);
    let mut s = session(&mut ts, single(), 30, 4);
    let plan = s.next_batch();
    let labels = vec![false; plan.ids.len()];
    assert!(s.complete_round(&plan, &labels[..9]).is_err());
    let mut stale = plan.clone();
    stale.round = 3;
    assert!(s.complete_round(&stale, &labels).is_err());
    let mut dup = plan.clone();
    dup.ids[1] = dup.ids[0];
    assert!(s.complete_round(&dup, &labels).is_err());
    assert_eq!(s.labels_used(), 0);
    s.complete_round(&plan, &labels).unwrap();
    // The same ids again belong to an older round and are already labeled.
    let mut again = plan.clone();
    again.round = 1;
    assert!(matches!(
        s.complete_round(&again, &labels),
        Err(EngineError::BatchMismatch(_))
    ));
    assert_eq!(s.labels_used(), 10);
}

#[test]
fn budget_beyond_pool_rejected() {
    let mut ts = small_site(11);
    let strategy = single();
    let cfg = SessionConfig::new(ts.len() + 1, 0);
    let data = SessionData::prepare(&mut ts, &strategy, &cfg.classifier, None, None).unwrap();
    assert!(matches!(
        ActiveSession::new(strategy, cfg, data),
        Err(EngineError::InvalidSession(_))
    ));
}

#[test]
fn baselines_break_ties_by_id() {
    let mut ts = small_site(12);
    let labels = ts.labels();
    for kind in [StrategyKind::Uncertainty, StrategyKind::PositiveCertainty] {
        let strategy = Strategy::new(kind, vec![Modality::THERMAL]).unwrap();
        let cfg = SessionConfig::new(20, 0);
        let data = SessionData::prepare(&mut ts, &strategy, &cfg.classifier, None, None).unwrap();
        let s = ActiveSession::with_classifiers(strategy, cfg, data, vec![Box::new(Constant(0.3))])
            .unwrap();
        assert_eq!(s.next_batch().ids, (0..10).collect::<Vec<_>>());
    }
    let strategy = Strategy::new(
        StrategyKind::Disagree,
        vec![Modality::THERMAL, Modality::RGB],
    )
    .unwrap();
    let cfg = SessionConfig::new(20, 0);
    let data = SessionData::prepare(&mut ts, &strategy, &cfg.classifier, None, None).unwrap();
    let models: Vec<Box<dyn ProbabilisticClassifier>> = vec![
        Box::new(Constant(0.9)),
        Box::new(Lookup::new(&data, 1, &labels)),
    ];
    let s = ActiveSession::with_classifiers(strategy, cfg, data, models).unwrap();
    let negatives: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == Label::Negative)
        .take(10)
        .collect();
    assert_eq!(s.next_batch().ids, negatives);
}

#[test]
fn random_baseline_is_seeded() {
    let mut ts = small_site(13);
    let strategy = Strategy::new(StrategyKind::Random, vec![Modality::THERMAL]).unwrap();
    let a = session(&mut ts, strategy.clone(), 20, 5).next_batch();
    let b = session(&mut ts, strategy.clone(), 20, 5).next_batch();
    let c = session(&mut ts, strategy, 20, 6).next_batch();
    assert_eq!(a, b);
    assert_ne!(a.ids, c.ids);
    assert_eq!(a.ids.iter().collect::<HashSet<_>>().len(), 10);
}

#[test]
fn test_set_accuracy_reported_each_round() {
    let mut ts = small_site(14);
    let labels = ts.labels();
    let split = rarequery_core::experiments::split_labels(
        &labels,
        &rarequery_core::experiments::SplitSpec::active(0),
    )
    .unwrap();
    let strategy = single();
    let cfg = SessionConfig {
        classifier: ClassifierConfig::reference(),
        ..SessionConfig::new(30, 0)
    };
    let data = SessionData::prepare(
        &mut ts,
        &strategy,
        &cfg.classifier,
        Some(split.train.clone()),
        Some(split.test_set()),
    )
    .unwrap();
    let mut s = ActiveSession::new(strategy, cfg, data).unwrap();
    let log = s.run(&mut GroundTruthOracle::new(labels)).unwrap();
    assert_eq!(log.pool_size, split.train.len());
    for r in &log.rounds {
        let acc = r.test_accuracy.unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!(r.queried_ids.iter().all(|id| !split.test.contains(id)));
    }
}
