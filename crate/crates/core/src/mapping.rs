//! Detections to object coordinates, K-means clusters and map export.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::seeds::{self, Stream};
use crate::tilestore::{Extent, MiddenRegistry, Tileset};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("k-means needs k >= 1 and at least k points (k = {k}, points = {points})")]
    TooFewPoints { k: usize, points: usize },
    #[error("{outputs} outputs for {tiles} tiles")]
    LengthMismatch { outputs: usize, tiles: usize },
    #[error("malformed map file: {0}")]
    Malformed(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MappingError>;

pub const MAX_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionPoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
    /// Number of raw detections merged into this point.
    pub weight: usize,
}

impl DetectionPoint {
    pub fn new(x: f64, y: f64, confidence: f64) -> Self {
        Self {
            x,
            y,
            confidence,
            weight: 1,
        }
    }

    pub fn xy(&self) -> [f64; 2] {
        [self.x, self.y]
    }
}

/// Ground-truth centers as full-confidence points.
pub fn registry_points(registry: &MiddenRegistry) -> Vec<DetectionPoint> {
    registry
        .centers
        .iter()
        .map(|&(x, y)| DetectionPoint::new(x, y, 1.0))
        .collect()
}

/// Centers of tiles with `output >= threshold`, merged until no two points
/// lie within `merge_radius_m`.
pub fn detections_to_points(
    tileset: &Tileset,
    outputs: &[f64],
    threshold: f64,
    merge_radius_m: f64,
) -> Result<Vec<DetectionPoint>> {
    if outputs.len() != tileset.len() {
        return Err(MappingError::LengthMismatch {
            outputs: outputs.len(),
            tiles: tileset.len(),
        });
    }
    let raw = tileset
        .tiles
        .iter()
        .zip(outputs)
        .filter(|(_, &p)| p >= threshold)
        .map(|(t, &p)| DetectionPoint::new(t.center.0, t.center.1, p))
        .collect();
    Ok(merge_points(raw, merge_radius_m))
}

/// Repeatedly joins connected groups of points (single linkage at
/// `radius`) into their weighted mean, keeping the highest confidence,
/// until a pass changes nothing. The result is a fixed point, so merging
/// it again is a no-op.
pub fn merge_points(mut points: Vec<DetectionPoint>, radius: f64) -> Vec<DetectionPoint> {
    loop {
        let n = points.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut i: usize) -> usize {
            while p[i] != i {
                p[i] = p[p[i]];
                i = p[i];
            }
            i
        }
        let mut joined = false;
        for i in 0..n {
            for j in i + 1..n {
                let d = (points[i].x - points[j].x).hypot(points[i].y - points[j].y);
                if d <= radius {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                        joined = true;
                    }
                }
            }
        }
        if !joined {
            return points;
        }
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
        for i in 0..n {
            let r = find(&mut parent, i);
            groups[r].push(i);
        }
        points = groups
            .into_iter()
            .filter(|g| !g.is_empty())
            .map(|g| {
                let w: usize = g.iter().map(|&i| points[i].weight).sum();
                let (mut sx, mut sy, mut conf) = (0.0, 0.0, f64::MIN);
                for &i in &g {
                    sx += points[i].x * points[i].weight as f64;
                    sy += points[i].y * points[i].weight as f64;
                    conf = conf.max(points[i].confidence);
                }
                DetectionPoint {
                    x: sx / w as f64,
                    y: sy / w as f64,
                    confidence: conf,
                    weight: w,
                }
            })
            .collect();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeans {
    pub centroids: Vec<[f64; 2]>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(p: [f64; 2], centroids: &[[f64; 2]]) -> (usize, f64) {
    let mut best = (0, dist2(p, centroids[0]));
    for (c, &q) in centroids.iter().enumerate().skip(1) {
        let d = dist2(p, q);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let mut centroids = vec![points[rng.random_range(0..points.len())]];
    let mut d2: Vec<f64> = points.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        } else {
            rng.random_range(0..points.len())
        };
        let c = points[pick];
        centroids.push(c);
        for (d, &p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, c));
        }
    }
    centroids
}

/// Single-point transfers (Hartigan's rule) after Lloyd converges: move a
/// point whenever doing so strictly lowers the total squared error, with
/// centroids kept at member means. Lloyd fixed points are often not stable
/// under these moves; the result is. Clusters never empty.
fn refine(
    points: &[[f64; 2]],
    centroids: &mut [[f64; 2]],
    assignments: &mut [usize],
    history: &mut Vec<f64>,
) {
    let k = centroids.len();
    let mut counts = vec![0usize; k];
    assignments.iter().for_each(|&a| counts[a] += 1);
    let mut moved = false;
    loop {
        let mut improved = false;
        for (i, &p) in points.iter().enumerate() {
            let from = assignments[i];
            if counts[from] < 2 {
                continue;
            }
            let nf = counts[from] as f64;
            let loss = nf / (nf - 1.0) * dist2(p, centroids[from]);
            let mut best: Option<(usize, f64)> = None;
            for to in (0..k).filter(|&c| c != from) {
                let nt = counts[to] as f64;
                let gain = nt / (nt + 1.0) * dist2(p, centroids[to]);
                // Relative margin keeps rounding noise from cycling.
                if gain < loss * (1.0 - 1e-12) && best.is_none_or(|(_, g)| gain < g) {
                    best = Some((to, gain));
                }
            }
            if let Some((to, _)) = best {
                let (nf, nt) = (counts[from] as f64, counts[to] as f64);
                for d in 0..2 {
                    centroids[from][d] = (centroids[from][d] * nf - p[d]) / (nf - 1.0);
                    centroids[to][d] = (centroids[to][d] * nt + p[d]) / (nt + 1.0);
                }
                counts[from] -= 1;
                counts[to] += 1;
                assignments[i] = to;
                improved = true;
                moved = true;
            }
        }
        if !improved {
            break;
        }
    }
    if moved {
        // Recompute means exactly so the centroid law holds bit-for-bit.
        let mut sums = vec![[0.0f64; 2]; k];
        for (&p, &a) in points.iter().zip(assignments.iter()) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
        }
        for c in 0..k {
            centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
        }
        let inertia: f64 = points
            .iter()
            .zip(assignments.iter())
            .map(|(&p, &a)| dist2(p, centroids[a]))
            .sum();
        history.push(inertia);
    }
}

fn lloyd(points: &[[f64; 2]], mut centroids: Vec<[f64; 2]>) -> KMeans {
    let k = centroids.len();
    let mut assignments: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let mut next: Vec<usize> = points.iter().map(|&p| nearest(p, &centroids).0).collect();
        // Reseed empty clusters at the point farthest from its centroid.
        for c in 0..k {
            if next.contains(&c) {
                continue;
            }
            let mut counts = vec![0usize; k];
            next.iter().for_each(|&a| counts[a] += 1);
            let far = (0..points.len())
                .filter(|&i| counts[next[i]] > 1)
                .max_by(|&a, &b| {
                    dist2(points[a], centroids[next[a]])
                        .total_cmp(&dist2(points[b], centroids[next[b]]))
                        .then(b.cmp(&a))
                });
            if let Some(i) = far {
                centroids[c] = points[i];
                next[i] = c;
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&next)
            .map(|(&p, &a)| dist2(p, centroids[a]))
            .sum();
        history.push(inertia);
        iterations += 1;
        let converged = next == assignments;
        assignments = next;
        if converged || iterations >= MAX_ITERATIONS {
            break;
        }
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (&p, &a) in points.iter().zip(&assignments) {
            sums[a][0] += p[0];
            sums[a][1] += p[1];
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
            }
        }
    }
    refine(points, &mut centroids, &mut assignments, &mut history);
    let inertia = *history.last().expect("at least one iteration");
    KMeans {
        centroids,
        assignments,
        inertia,
        iterations,
        inertia_history: history,
    }
}

/// Lloyd's algorithm from k-means++ seeds, best of `restarts` runs by
/// inertia (earliest run wins ties).
pub fn kmeans_with_restarts(
    points: &[[f64; 2]],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(MappingError::TooFewPoints {
            k,
            points: points.len(),
        });
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let mut rng = seeds::rng(seed, r as u64, Stream::Init, 0);
        let run = lloyd(points, plus_plus_init(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub fn kmeans(points: &[[f64; 2]], k: usize, seed: u64) -> Result<KMeans> {
    kmeans_with_restarts(points, k, seed, DEFAULT_RESTARTS)
}

/// Inertia for each k in `1..=k_max` (capped at the number of points).
pub fn elbow_scan(points: &[[f64; 2]], k_max: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    (1..=k_max.min(points.len()))
        .map(|k| kmeans(points, k, seed).map(|r| (k, r.inertia)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub centroid: [f64; 2],
    pub members: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionMap {
    /// Local-meter origin the coordinates are relative to.
    pub origin: [f64; 2],
    pub points: Vec<DetectionPoint>,
    pub clusters: Vec<Cluster>,
    pub k: usize,
    /// Site bounds; never exported when redacting landscape.
    pub extent: Option<Extent>,
}

impl DetectionMap {
    /// Clusters `points` into `min(k, points)` groups; an empty point list
    /// gives an empty map.
    pub fn build(points: Vec<DetectionPoint>, k: usize, seed: u64) -> Result<Self> {
        let k = k.min(points.len());
        let clusters = if k == 0 {
            Vec::new()
        } else {
            let xy: Vec<[f64; 2]> = points.iter().map(|p| p.xy()).collect();
            let km = kmeans(&xy, k, seed)?;
            (0..k)
                .map(|c| Cluster {
                    centroid: km.centroids[c],
                    members: (0..xy.len()).filter(|&i| km.assignments[i] == c).collect(),
                })
                .collect()
        };
        Ok(Self {
            origin: [0.0, 0.0],
            points,
            clusters,
            k,
            extent: None,
        })
    }
}

fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Writes a GeoJSON-style feature collection: one `detection` point per
/// detection, one `cluster_center` point and one `cluster_hull` polygon per
/// cluster. Coordinates are local meters.
pub fn export_map(
    map: &DetectionMap,
    path: impl AsRef<Path>,
    redact_landscape: bool,
) -> Result<()> {
    fs::write(
        path,
        serde_json::to_vec_pretty(&map_to_geojson(map, redact_landscape))?,
    )?;
    Ok(())
}

pub fn map_to_geojson(map: &DetectionMap, redact_landscape: bool) -> Value {
    let mut cluster_of = vec![None; map.points.len()];
    for (c, cl) in map.clusters.iter().enumerate() {
        for &m in &cl.members {
            cluster_of[m] = Some(c);
        }
    }
    let mut features = Vec::new();
    for (i, p) in map.points.iter().enumerate() {
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": [p.x, p.y]},
            "properties": {"role": "detection", "id": i, "confidence": p.confidence, "weight": p.weight, "cluster": cluster_of[i]},
        }));
    }
    for (c, cl) in map.clusters.iter().enumerate() {
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Point", "coordinates": cl.centroid},
            "properties": {"role": "cluster_center", "cluster": c, "members": cl.members.len()},
        }));
        let mut ring = convex_hull(cl.members.iter().map(|&m| map.points[m].xy()).collect());
        if let Some(&first) = ring.first() {
            ring.push(first);
        }
        features.push(json!({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [ring]},
            "properties": {"role": "cluster_hull", "cluster": c},
        }));
    }
    let mut props =
        json!({"units": "m", "origin": map.origin, "k": map.k, "redacted": redact_landscape});
    if !redact_landscape {
        if let Some(e) = map.extent {
            props["extent"] = json!([e.min_x, e.min_y, e.max_x, e.max_y]);
        }
    }
    json!({"type": "FeatureCollection", "properties": props, "features": features})
}

/// Detection points from an exported map, in export order.
pub fn read_map_points(path: impl AsRef<Path>) -> Result<Vec<DetectionPoint>> {
    let v: Value = serde_json::from_slice(&fs::read(path)?)?;
    let features = v["features"]
        .as_array()
        .ok_or_else(|| MappingError::Malformed("no features".into()))?;
    features
        .iter()
        .filter(|f| f["properties"]["role"] == "detection")
        .map(|f| {
            let c = &f["geometry"]["coordinates"];
            let num = |x: &Value| {
                x.as_f64()
                    .ok_or_else(|| MappingError::Malformed("bad coordinate".into()))
            };
            Ok(DetectionPoint {
                x: num(&c[0])?,
                y: num(&c[1])?,
                confidence: num(&f["properties"]["confidence"])?,
                weight: f["properties"]["weight"].as_u64().unwrap_or(1) as usize,
            })
        })
        .collect()
}
