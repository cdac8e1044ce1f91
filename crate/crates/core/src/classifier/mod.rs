//! Probabilistic binary classifiers over tile features.
//!
//! The reference model pools each tile to a coarse grid plus per-channel
//! summary statistics ([`FeatureTable`]), then applies one tanh hidden layer
//! and a sigmoid output. It is trained on mean binary cross-entropy with
//! Adam. Anything implementing [`ProbabilisticClassifier`] can stand in for
//! it.

mod features;
mod model;

pub use features::{extract, FeatureTable};
pub use model::{load_model, save_model, ModelBundle};

use crate::seeds::{self, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Probability clamp applied before taking logarithms.
pub const BCE_EPSILON: f64 = 1e-7;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{probabilities} probabilities but {labels} labels")]
    LengthMismatch { probabilities: usize, labels: usize },
    #[error("feature vector has {got} values, model expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid classifier config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tilestore(#[from] crate::tilestore::TilestoreError),
    #[error("model file: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, ClassifierError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub decision_threshold: f64,
    /// Side of the block-mean pooling grid per channel.
    pub pool_grid: usize,
    /// Width of the tanh hidden layer; 0 gives plain logistic regression.
    pub hidden_width: usize,
    pub init_seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            learning_rate: 1e-4,
            epochs: 10,
            decision_threshold: 0.5,
            pool_grid: 8,
            hidden_width: 32,
            init_seed: 0,
        }
    }
}

impl ClassifierConfig {
    /// Defaults with the learning rate the small reference network needs to
    /// converge within ten epochs (the 1e-4 default suits a pretrained backbone).
    pub fn reference() -> Self {
        Self {
            learning_rate: 1e-2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ClassifierError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.decision_threshold > 0.0 && self.decision_threshold < 1.0) {
            return Err(ClassifierError::InvalidConfig(
                "decision_threshold must lie in (0, 1)".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ClassifierError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.pool_grid == 0 {
            return Err(ClassifierError::InvalidConfig(
                "pool_grid must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// A model mapping a feature vector to the probability of the positive class.
pub trait ProbabilisticClassifier: Send + Sync {
    fn predict_proba(&self, features: &[f32]) -> f64;

    /// Retrains from the current parameters on `features`/`labels`.
    fn train(
        &mut self,
        features: &[&[f32]],
        labels: &[bool],
        shuffle_seed: u64,
    ) -> Result<TrainReport>;

    /// Restores the parameters captured at construction.
    fn reset(&mut self);

    /// An independent copy, used to train without disturbing the original.
    fn boxed_clone(&self) -> Box<dyn ProbabilisticClassifier>;

    fn threshold(&self) -> f64 {
        0.5
    }

    fn classify(&self, features: &[f32]) -> bool {
        self.predict_proba(features) >= self.threshold()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[ε, 1-ε]`.
pub fn bce_loss(probabilities: &[f64], labels: &[bool]) -> Result<f64> {
    if probabilities.len() != labels.len() {
        return Err(ClassifierError::LengthMismatch {
            probabilities: probabilities.len(),
            labels: labels.len(),
        });
    }
    if probabilities.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = probabilities
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probabilities.len() as f64)
}

/// Parameters and Adam moments of the reference network.
///
/// Layout with a hidden layer: `W1 (h x d) | b1 (h) | w2 (h) | b2`; without
/// one: `w (d) | b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierState {
    config: ClassifierConfig,
    input_dim: usize,
    params: Vec<f64>,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step: u64,
    initial: Vec<f64>,
}

impl ClassifierState {
    /// Fresh model: Xavier-uniform hidden weights from `config.init_seed`,
    /// zero biases and a zero output layer, so every prediction is 0.5.
    pub fn new(input_dim: usize, config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(ClassifierError::InvalidConfig(
                "input dimension must be positive".into(),
            ));
        }
        let h = config.hidden_width;
        let len = if h == 0 {
            input_dim + 1
        } else {
            h * input_dim + 2 * h + 1
        };
        let mut params = vec![0.0; len];
        if h > 0 {
            let bound = (6.0 / (input_dim + h) as f64).sqrt();
            let mut rng = seeds::rng(config.init_seed, 0, Stream::Init, input_dim as u64);
            for w in &mut params[..h * input_dim] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(Self::from_parts(config, input_dim, params.clone(), params))
    }

    pub(crate) fn from_parts(
        config: ClassifierConfig,
        input_dim: usize,
        params: Vec<f64>,
        initial: Vec<f64>,
    ) -> Self {
        let n = params.len();
        Self {
            config,
            input_dim,
            params,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            initial,
        }
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) {
        assert_eq!(params.len(), self.params.len(), "parameter count");
        self.params = params;
    }

    pub fn initial_snapshot(&self) -> &[f64] {
        &self.initial
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn hidden(&self) -> usize {
        self.config.hidden_width
    }

    pub fn logit(&self, x: &[f32]) -> f64 {
        logit_with(&self.params, self.input_dim, self.hidden(), x, None)
    }

    /// Analytic gradient of the mean clamped BCE over `batch`.
    pub fn gradient(&self, batch: &[(&[f32], bool)]) -> Vec<f64> {
        gradient_with(&self.params, self.input_dim, self.hidden(), batch)
    }

    /// Mean clamped BCE of the current parameters over `batch`.
    pub fn loss(&self, batch: &[(&[f32], bool)]) -> f64 {
        loss_with(&self.params, self.input_dim, self.hidden(), batch)
    }

    pub fn loss_at(&self, params: &[f64], batch: &[(&[f32], bool)]) -> f64 {
        loss_with(params, self.input_dim, self.hidden(), batch)
    }

    fn adam_step(&mut self, grad: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let lr = self.config.learning_rate;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (((p, m), v), g) in self
            .params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
            .zip(grad)
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPSILON);
        }
    }

    /// Runs `epochs * ceil(N / batch_size)` Adam steps on shuffled
    /// mini-batches.
    pub fn fit(&mut self, samples: &[(&[f32], bool)], shuffle_seed: u64) -> Result<TrainReport> {
        if samples.is_empty() {
            return Err(ClassifierError::EmptyTrainingSet);
        }
        if let Some((x, _)) = samples.iter().find(|(x, _)| x.len() != self.input_dim) {
            return Err(ClassifierError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let initial_loss = self.loss(samples);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = seeds::rng(shuffle_seed, 0, Stream::Shuffle, 0);
        let mut batch = Vec::with_capacity(self.config.batch_size);
        let mut steps = 0u64;
        for _ in 0..self.config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(self.config.batch_size) {
                batch.clear();
                batch.extend(chunk.iter().map(|&i| samples[i]));
                let grad = self.gradient(&batch);
                steps += 1;
                if grad.iter().any(|g| !g.is_finite()) {
                    return Err(ClassifierError::NonFiniteLoss { step: steps });
                }
                self.adam_step(&grad);
                if self.params.iter().any(|p| !p.is_finite()) {
                    return Err(ClassifierError::NonFiniteLoss { step: steps });
                }
            }
        }
        let final_loss = self.loss(samples);
        if !final_loss.is_finite() {
            return Err(ClassifierError::NonFiniteLoss { step: steps });
        }
        Ok(TrainReport {
            steps,
            initial_loss,
            final_loss,
        })
    }
}

impl ProbabilisticClassifier for ClassifierState {
    fn predict_proba(&self, features: &[f32]) -> f64 {
        sigmoid(self.logit(features))
    }

    fn train(
        &mut self,
        features: &[&[f32]],
        labels: &[bool],
        shuffle_seed: u64,
    ) -> Result<TrainReport> {
        if features.len() != labels.len() {
            return Err(ClassifierError::LengthMismatch {
                probabilities: features.len(),
                labels: labels.len(),
            });
        }
        let samples: Vec<(&[f32], bool)> = features
            .iter()
            .copied()
            .zip(labels.iter().copied())
            .collect();
        self.fit(&samples, shuffle_seed)
    }

    fn reset(&mut self) {
        self.params.clone_from(&self.initial);
        self.first_moment.iter_mut().for_each(|v| *v = 0.0);
        self.second_moment.iter_mut().for_each(|v| *v = 0.0);
        self.step = 0;
    }

    fn boxed_clone(&self) -> Box<dyn ProbabilisticClassifier> {
        Box::new(self.clone())
    }

    fn threshold(&self) -> f64 {
        self.config.decision_threshold
    }
}

fn logit_with(
    params: &[f64],
    d: usize,
    h: usize,
    x: &[f32],
    mut hidden_out: Option<&mut Vec<f64>>,
) -> f64 {
    if h == 0 {
        let mut z = params[d];
        for (w, v) in params[..d].iter().zip(x) {
            z += w * *v as f64;
        }
        return z;
    }
    let (w1, rest) = params.split_at(h * d);
    let (b1, rest) = rest.split_at(h);
    let (w2, b2) = rest.split_at(h);
    let mut z = b2[0];
    if let Some(out) = hidden_out.as_deref_mut() {
        out.clear();
    }
    for j in 0..h {
        let row = &w1[j * d..(j + 1) * d];
        let mut a = b1[j];
        for (w, v) in row.iter().zip(x) {
            a += w * *v as f64;
        }
        let a = a.tanh();
        if let Some(out) = hidden_out.as_deref_mut() {
            out.push(a);
        }
        z += w2[j] * a;
    }
    z
}

fn loss_with(params: &[f64], d: usize, h: usize, batch: &[(&[f32], bool)]) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let sum: f64 = batch
        .iter()
        .map(|(x, y)| {
            let p =
                sigmoid(logit_with(params, d, h, x, None)).clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            if *y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    sum / batch.len() as f64
}

fn gradient_with(params: &[f64], d: usize, h: usize, batch: &[(&[f32], bool)]) -> Vec<f64> {
    let mut grad = vec![0.0; params.len()];
    if batch.is_empty() {
        return grad;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut hidden = Vec::with_capacity(h);
    for (x, y) in batch {
        let z = logit_with(params, d, h, x, Some(&mut hidden));
        let p = sigmoid(z);
        // The clamp is flat outside [ε, 1-ε].
        let dz = if !(BCE_EPSILON..=1.0 - BCE_EPSILON).contains(&p) {
            0.0
        } else {
            (p - if *y { 1.0 } else { 0.0 }) * scale
        };
        if dz == 0.0 {
            continue;
        }
        if h == 0 {
            for (g, v) in grad[..d].iter_mut().zip(x.iter()) {
                *g += dz * *v as f64;
            }
            grad[d] += dz;
            continue;
        }
        let w2 = &params[h * d + h..h * d + 2 * h];
        let (gw1, rest) = grad.split_at_mut(h * d);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        gb2[0] += dz;
        for j in 0..h {
            gw2[j] += dz * hidden[j];
            let delta = dz * w2[j] * (1.0 - hidden[j] * hidden[j]);
            if delta == 0.0 {
                continue;
            }
            gb1[j] += delta;
            for (g, v) in gw1[j * d..(j + 1) * d].iter_mut().zip(x.iter()) {
                *g += delta * *v as f64;
            }
        }
    }
    grad
}

/// Fraction of `features` classified correctly at the model's threshold.
pub fn accuracy<C: ProbabilisticClassifier + ?Sized>(
    model: &C,
    features: &[&[f32]],
    labels: &[bool],
) -> f64 {
    if features.is_empty() {
        return 0.0;
    }
    let correct = features
        .iter()
        .zip(labels)
        .filter(|(x, y)| model.classify(x) == **y)
        .count();
    correct as f64 / features.len() as f64
}
