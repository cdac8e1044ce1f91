//! Metric-based tile ranking and the conditional-positive diagnostic.
//!
//! Tiles are ordered by `|metric - target|` ascending with ties broken by
//! tile id. With the maximum thermal pixel value (MPV) as metric and the
//! dataset maximum as target, this is a descending sort on warmth.

use crate::tilestore::{Band, Label, Modality, Tileset, TilestoreError};
use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RankingError {
    #[error(transparent)]
    Tilestore(#[from] TilestoreError),
    #[error("metric values have not been computed for tile {0}")]
    MetricMissing(usize),
    #[error("custom metric has {got} values for {expected} tiles")]
    MetricLength { expected: usize, got: usize },
    #[error("ranking target could not be resolved: {0}")]
    UnresolvedTarget(String),
    #[error("tile {0} is unlabeled; the diagnostic needs ground truth")]
    Unlabeled(usize),
}

pub type Result<T> = std::result::Result<T, RankingError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Largest thermal pixel per tile, after downshift unless `pre_shift`.
    MaxThermalPixel { pre_shift: bool },
    /// Caller-provided value per tile id.
    Custom(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Value(f64),
    DatasetMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSpec {
    pub metric: Metric,
    pub target: Target,
}

impl Default for RankingSpec {
    fn default() -> Self {
        Self {
            metric: Metric::MaxThermalPixel { pre_shift: false },
            target: Target::DatasetMax,
        }
    }
}

pub const TIE_BREAK_ID_ASCENDING: &str = "id_ascending";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOrder {
    /// Tile ids, highest priority first.
    pub ids: Vec<usize>,
    /// Metric value per tile id (covers the whole tileset).
    pub metrics: Vec<f64>,
    pub target: f64,
    pub tie_break: String,
}

impl RankOrder {
    pub fn distance(&self, id: usize) -> f64 {
        (self.metrics[id] - self.target).abs()
    }

    /// Restricts the order to `keep`, preserving priority.
    pub fn restricted_to(&self, keep: &[bool]) -> RankOrder {
        RankOrder {
            ids: self.ids.iter().copied().filter(|&i| keep[i]).collect(),
            metrics: self.metrics.clone(),
            target: self.target,
            tie_break: self.tie_break.clone(),
        }
    }
}

/// Metric value of every tile without mutating the tileset.
pub fn metric_values(tileset: &Tileset, spec: &RankingSpec) -> Result<Vec<f64>> {
    match &spec.metric {
        Metric::MaxThermalPixel { pre_shift } => {
            let stack = tileset.stack(Modality::single(Band::Thermal))?;
            Ok(tileset
                .tiles
                .iter()
                .map(|t| {
                    let max = stack
                        .block(t.id)
                        .iter()
                        .copied()
                        .fold(f32::NEG_INFINITY, f32::max) as f64;
                    if *pre_shift {
                        max + t.thermal_shift as f64
                    } else {
                        max
                    }
                })
                .collect())
        }
        Metric::Custom(values) => {
            if values.len() != tileset.len() {
                return Err(RankingError::MetricLength {
                    expected: tileset.len(),
                    got: values.len(),
                });
            }
            Ok(values.clone())
        }
    }
}

/// Computes the metric and stores it on every tile.
pub fn compute_metric(tileset: &mut Tileset, spec: &RankingSpec) -> Result<Vec<f64>> {
    let values = metric_values(tileset, spec)?;
    for (t, v) in tileset.tiles.iter_mut().zip(&values) {
        t.metric_value = Some(*v);
    }
    Ok(values)
}

pub fn resolve_target(metrics: &[f64], target: Target) -> Result<f64> {
    let value = match target {
        Target::Value(v) => v,
        Target::DatasetMax => metrics.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    if value.is_finite() {
        Ok(value)
    } else {
        Err(RankingError::UnresolvedTarget(format!(
            "{target:?} over {} tiles",
            metrics.len()
        )))
    }
}

/// Orders all tiles by distance of their metric to the target.
pub fn rank_tiles(tileset: &Tileset, spec: &RankingSpec) -> Result<RankOrder> {
    rank_by_metric(metric_values(tileset, spec)?, spec.target)
}

/// Orders tiles by the metric values stored on them.
pub fn rank_stored(tileset: &Tileset, target: Target) -> Result<RankOrder> {
    let metrics = tileset
        .tiles
        .iter()
        .map(|t| t.metric_value.ok_or(RankingError::MetricMissing(t.id)))
        .collect::<Result<Vec<_>>>()?;
    rank_by_metric(metrics, target)
}

pub fn rank_by_metric(metrics: Vec<f64>, target: Target) -> Result<RankOrder> {
    let target = resolve_target(&metrics, target)?;
    let mut ids: Vec<usize> = (0..metrics.len()).collect();
    ids.sort_by(|&a, &b| {
        let da = (metrics[a] - target).abs();
        let db = (metrics[b] - target).abs();
        da.total_cmp(&db).then(a.cmp(&b))
    });
    Ok(RankOrder {
        ids,
        metrics,
        target,
        tie_break: TIE_BREAK_ID_ASCENDING.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    /// `m_t / n_t`, the direct conditional frequency.
    pub p_conditional: f64,
    /// `m_t * P(positive) / (m * P(MPV >= t))`; absent when there are no positives.
    pub p_factored: Option<f64>,
    pub n_at_least_t: usize,
    pub m_t: usize,
    /// Both forms agree as exact rationals.
    pub exact_match: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BayesCurve {
    pub points: Vec<CurvePoint>,
    pub base_rate: f64,
    pub omitted: Vec<(f64, String)>,
}

/// `P(positive | MPV >= t)` at every threshold, by counting.
pub fn bayes_positive_curve(
    tileset: &Tileset,
    metrics: &[f64],
    thresholds: &[f64],
) -> Result<BayesCurve> {
    let mut positive = Vec::with_capacity(tileset.len());
    for t in &tileset.tiles {
        match t.label {
            Label::Positive => positive.push(true),
            Label::Negative => positive.push(false),
            Label::Unlabeled => return Err(RankingError::Unlabeled(t.id)),
        }
    }
    if metrics.len() != tileset.len() {
        return Err(RankingError::MetricLength {
            expected: tileset.len(),
            got: metrics.len(),
        });
    }
    let n = tileset.len() as u64;
    let m = positive.iter().filter(|p| **p).count() as u64;
    let base_rate = if n == 0 { 0.0 } else { m as f64 / n as f64 };
    let mut points = Vec::new();
    let mut omitted = Vec::new();
    for &t in thresholds {
        let mut n_t = 0u64;
        let mut m_t = 0u64;
        for (v, p) in metrics.iter().zip(&positive) {
            if *v >= t {
                n_t += 1;
                if *p {
                    m_t += 1;
                }
            }
        }
        if n_t == 0 {
            omitted.push((
                t,
                "no tile has a metric value at or above the threshold".to_string(),
            ));
            continue;
        }
        let direct = Ratio::new(m_t, n_t);
        let factored = (m > 0).then(|| {
            let likelihood = Ratio::new(m_t, m);
            let prior = Ratio::new(m, n);
            let evidence = Ratio::new(n_t, n);
            likelihood * prior / evidence
        });
        let to_f64 = |r: Ratio<u64>| *r.numer() as f64 / *r.denom() as f64;
        points.push(CurvePoint {
            threshold: t,
            p_conditional: to_f64(direct),
            p_factored: factored.map(to_f64),
            n_at_least_t: n_t as usize,
            m_t: m_t as usize,
            exact_match: factored.is_none_or(|f| f == direct),
        });
    }
    Ok(BayesCurve {
        points,
        base_rate,
        omitted,
    })
}

/// Lower quantile (nearest rank) of `values` at `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx =
        ((q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64).floor() as usize).min(sorted.len() - 1);
    sorted[idx]
}

/// `count` evenly spaced quantiles from the minimum to the maximum.
pub fn quantile_thresholds(values: &[f64], count: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() || count == 0 {
        return Vec::new();
    }
    let mut out: Vec<f64> = (0..count)
        .map(|i| {
            let q = if count == 1 {
                0.0
            } else {
                i as f64 / (count - 1) as f64
            };
            sorted[((q * (sorted.len() - 1) as f64).floor() as usize).min(sorted.len() - 1)]
        })
        .collect();
    out.dedup();
    out
}
