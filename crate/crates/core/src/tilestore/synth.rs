//! Deterministic synthetic survey sites standing in for private field data.
//!
//! Thermal carries a smooth background with Gaussian warm blobs at every
//! registry center plus false-warm clutter; RGB carries brownish patches at
//! positives among soil-coloured clutter; LiDAR carries low bumps at
//! positives and steep termite-mound distractors.

use super::{Band, CropGeometry, MiddenRegistry, Orthomosaic, Result, Tileset, TilestoreError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmBlobParams {
    /// Peak contrast range of positive blobs above the local background.
    pub contrast: (f64, f64),
    pub sigma_m: f64,
    /// False-warm spots per hectare.
    pub clutter_per_ha: f64,
    pub clutter_contrast: (f64, f64),
    pub clutter_sigma_m: (f64, f64),
    pub background_level: f64,
    pub background_amplitude: f64,
    pub background_scale_m: f64,
    pub pixel_noise: f64,
}

impl Default for WarmBlobParams {
    fn default() -> Self {
        Self {
            contrast: (1.2, 2.4),
            sigma_m: 1.5,
            clutter_per_ha: 2.0,
            clutter_contrast: (0.3, 1.4),
            clutter_sigma_m: (1.0, 2.5),
            background_level: 20.0,
            background_amplitude: 0.6,
            background_scale_m: 80.0,
            pixel_noise: 0.08,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterLayout {
    pub count: usize,
    pub spread_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub seed: u64,
    pub extent_m: f64,
    /// Number of positive objects (registry centers) to place.
    pub positive_count: usize,
    /// Upper bound on the post-crop positive tile rate, if any.
    pub imbalance_target: Option<f64>,
    pub crop: CropGeometry,
    pub bands: Vec<Band>,
    pub thermal_resolution_m: f64,
    pub rgb_resolution_m: f64,
    pub lidar_resolution_m: f64,
    pub warm_blob: WarmBlobParams,
    pub clusters: Option<ClusterLayout>,
    /// Minimum distance between centers; defaults to twice the crop interval.
    pub min_separation_m: Option<f64>,
    /// Width of a sensor-void strip (zeros in thermal and RGB) on the east edge.
    pub void_strip_m: f64,
    pub rgb_clutter_per_ha: f64,
    pub termite_mounds_per_ha: f64,
}

impl Default for SiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            extent_m: 485.0,
            positive_count: 5,
            imbalance_target: None,
            crop: CropGeometry::default(),
            bands: Band::ALL.to_vec(),
            thermal_resolution_m: 0.5,
            rgb_resolution_m: 0.5,
            lidar_resolution_m: 1.0,
            warm_blob: WarmBlobParams::default(),
            clusters: None,
            min_separation_m: None,
            void_strip_m: 0.0,
            rgb_clutter_per_ha: 6.0,
            termite_mounds_per_ha: 3.0,
        }
    }
}

impl SiteConfig {
    /// The reference benchmark: 485 m square (8,836 tiles at 20 m / 5 m),
    /// five middens giving 80 positive tiles (~0.9%).
    pub fn benchmark(seed: u64) -> Self {
        Self {
            seed,
            imbalance_target: Some(0.0091),
            ..Self::default()
        }
    }

    fn resolution(&self, band: Band) -> f64 {
        match band {
            Band::Thermal => self.thermal_resolution_m,
            Band::Rgb => self.rgb_resolution_m,
            Band::Lidar => self.lidar_resolution_m,
        }
    }
}

struct Bump {
    x: f64,
    y: f64,
    sigma: f64,
    peak: f64,
}

struct Patch {
    x: f64,
    y: f64,
    radius: f64,
    color: [f64; 3],
}

struct Waves {
    terms: Vec<(f64, f64, f64, f64)>,
}

impl Waves {
    fn new(rng: &mut ChaCha8Rng, scale_m: f64, count: usize) -> Self {
        let terms = (0..count)
            .map(|_| {
                let angle = rng.random::<f64>() * 2.0 * PI;
                let wavelength = scale_m * (0.5 + rng.random::<f64>());
                let phase = rng.random::<f64>() * 2.0 * PI;
                let amp = 0.5 + rng.random::<f64>();
                (
                    angle.cos() / wavelength,
                    angle.sin() / wavelength,
                    phase,
                    amp,
                )
            })
            .collect::<Vec<_>>();
        Self { terms }
    }

    /// Value in roughly [-1, 1].
    fn at(&self, x: f64, y: f64) -> f64 {
        let total: f64 = self.terms.iter().map(|t| t.3).sum();
        self.terms
            .iter()
            .map(|&(kx, ky, ph, a)| a * (2.0 * PI * (kx * x + ky * y) + ph).sin())
            .sum::<f64>()
            / total
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi <= lo {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn scatter(rng: &mut ChaCha8Rng, extent_m: f64, per_ha: f64) -> Vec<(f64, f64)> {
    let expected = per_ha * extent_m * extent_m / 10_000.0;
    let n = expected.round() as usize;
    (0..n)
        .map(|_| {
            (
                rng.random::<f64>() * extent_m,
                rng.random::<f64>() * extent_m,
            )
        })
        .collect()
}

/// Adds `f(dx, dy)` within `radius` meters of `(x, y)` to a single-channel grid.
fn splat(
    grid: &mut [f64],
    side: usize,
    res: f64,
    (x, y): (f64, f64),
    radius: f64,
    mut f: impl FnMut(f64, f64) -> f64,
) {
    let c0 = (((x - radius) / res).floor().max(0.0)) as usize;
    let c1 = (((x + radius) / res).ceil().max(0.0) as usize).min(side);
    let r0 = (((y - radius) / res).floor().max(0.0)) as usize;
    let r1 = (((y + radius) / res).ceil().max(0.0) as usize).min(side);
    for r in r0..r1 {
        let py = (r as f64 + 0.5) * res;
        for c in c0..c1 {
            let px = (c as f64 + 0.5) * res;
            grid[r * side + c] += f(px - x, py - y);
        }
    }
}

fn place_centers(cfg: &SiteConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>> {
    let margin = cfg.crop.interval_m;
    let lo = margin;
    let hi = cfg.extent_m - margin;
    let separation = cfg.min_separation_m.unwrap_or(2.0 * cfg.crop.interval_m);
    let fail = || TilestoreError::Placement {
        count: cfg.positive_count,
        separation_m: separation,
    };
    if cfg.positive_count == 0 {
        return Ok(Vec::new());
    }
    if hi <= lo {
        return Err(fail());
    }
    let cluster_centers: Vec<(f64, f64)> = match &cfg.clusters {
        Some(layout) if layout.count > 0 => {
            let inner = layout.spread_m.min((hi - lo) / 2.0);
            (0..layout.count)
                .map(|_| {
                    (
                        rng.random_range(lo + inner..=hi - inner),
                        rng.random_range(lo + inner..=hi - inner),
                    )
                })
                .collect()
        }
        _ => Vec::new(),
    };
    let spread = cfg.clusters.as_ref().map(|c| c.spread_m).unwrap_or(0.0);
    let normal = Normal::new(0.0, spread.max(1e-9)).expect("finite spread");
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(cfg.positive_count);
    let mut attempts = 0usize;
    while centers.len() < cfg.positive_count {
        attempts += 1;
        if attempts > 200_000 {
            return Err(fail());
        }
        let (x, y) = if cluster_centers.is_empty() {
            (rng.random_range(lo..hi), rng.random_range(lo..hi))
        } else {
            let (cx, cy) = cluster_centers[centers.len() % cluster_centers.len()];
            (cx + normal.sample(rng), cy + normal.sample(rng))
        };
        if !(lo..hi).contains(&x) || !(lo..hi).contains(&y) {
            continue;
        }
        if centers
            .iter()
            .all(|&(ox, oy)| ((ox - x).powi(2) + (oy - y).powi(2)).sqrt() >= separation)
        {
            centers.push((x, y));
        }
    }
    Ok(centers)
}

/// Generates co-registered mosaics and the registry of positive centers.
pub fn generate_synthetic_site(cfg: &SiteConfig) -> Result<(Vec<Orthomosaic>, MiddenRegistry)> {
    cfg.crop.validate()?;
    if cfg.extent_m.is_nan() || cfg.extent_m <= 0.0 {
        return Err(TilestoreError::InvalidGeometry(format!(
            "extent {} must be positive",
            cfg.extent_m
        )));
    }
    let per_axis = cfg.crop.tiles_per_axis(cfg.extent_m);
    let tiles = per_axis * per_axis;
    if let Some(target) = cfg.imbalance_target {
        let positive_tiles = (cfg.positive_count * cfg.crop.overlap_factor()) as f64;
        if tiles == 0 || positive_tiles > target * tiles as f64 {
            let achievable = if tiles == 0 {
                f64::INFINITY
            } else {
                positive_tiles / tiles as f64
            };
            return Err(TilestoreError::InfeasibleImbalance {
                requested: target,
                achievable,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = place_centers(cfg, &mut rng)?;
    let blob = &cfg.warm_blob;
    let warm: Vec<Bump> = centers
        .iter()
        .map(|&(x, y)| Bump {
            x,
            y,
            sigma: blob.sigma_m,
            peak: uniform(&mut rng, blob.contrast),
        })
        .collect();
    let clutter: Vec<Bump> = scatter(&mut rng, cfg.extent_m, blob.clutter_per_ha)
        .into_iter()
        .map(|(x, y)| Bump {
            x,
            y,
            sigma: uniform(&mut rng, blob.clutter_sigma_m),
            peak: uniform(&mut rng, blob.clutter_contrast),
        })
        .collect();
    let soil: Vec<Patch> = scatter(&mut rng, cfg.extent_m, cfg.rgb_clutter_per_ha)
        .into_iter()
        .map(|(x, y)| Patch {
            x,
            y,
            radius: rng.random_range(1.5..4.0),
            color: [
                rng.random_range(0.38..0.50),
                rng.random_range(0.30..0.40),
                rng.random_range(0.20..0.30),
            ],
        })
        .collect();
    let mounds: Vec<Bump> = scatter(&mut rng, cfg.extent_m, cfg.termite_mounds_per_ha)
        .into_iter()
        .map(|(x, y)| Bump {
            x,
            y,
            sigma: rng.random_range(0.8..1.2),
            peak: rng.random_range(1.0..2.0),
        })
        .collect();
    let thermal_waves = Waves::new(&mut rng, blob.background_scale_m, 6);
    let rgb_waves = Waves::new(&mut rng, 60.0, 5);
    let ground_waves = Waves::new(&mut rng, 150.0, 4);

    let mut mosaics = Vec::new();
    for band in [Band::Thermal, Band::Rgb, Band::Lidar] {
        if !cfg.bands.contains(&band) {
            continue;
        }
        let res = cfg.resolution(band);
        let side = (cfg.extent_m / res).round() as usize;
        if ((side as f64) * res - cfg.extent_m).abs() > 1e-6 {
            return Err(TilestoreError::NonIntegerPixels {
                band,
                resolution_m: res,
                detail: format!("extent {} m", cfg.extent_m),
            });
        }
        let mut band_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0x5EED_0000 + band as u64));
        let pixels = match band {
            Band::Thermal => {
                let mut grid = vec![0.0f64; side * side];
                let noise = Normal::new(0.0, blob.pixel_noise.max(0.0)).expect("noise");
                for r in 0..side {
                    for c in 0..side {
                        let (x, y) = ((c as f64 + 0.5) * res, (r as f64 + 0.5) * res);
                        grid[r * side + c] = blob.background_level
                            + blob.background_amplitude * thermal_waves.at(x, y)
                            + noise.sample(&mut band_rng);
                    }
                }
                for b in warm.iter().chain(&clutter) {
                    let two_s2 = 2.0 * b.sigma * b.sigma;
                    splat(&mut grid, side, res, (b.x, b.y), 4.0 * b.sigma, |dx, dy| {
                        b.peak * (-(dx * dx + dy * dy) / two_s2).exp()
                    });
                }
                grid.into_iter().map(|v| v as f32).collect::<Vec<_>>()
            }
            Band::Rgb => {
                let grass = [0.36, 0.42, 0.22];
                let midden = [0.42, 0.33, 0.24];
                let noise = Normal::new(0.0, 0.02).expect("noise");
                let mut planes = vec![vec![0.0f64; side * side]; 3];
                let mut mask = vec![0.0f64; side * side];
                for r in 0..side {
                    for c in 0..side {
                        let (x, y) = ((c as f64 + 0.5) * res, (r as f64 + 0.5) * res);
                        let v = 0.05 * rgb_waves.at(x, y);
                        for (ch, plane) in planes.iter_mut().enumerate() {
                            plane[r * side + c] = grass[ch] + v;
                        }
                    }
                }
                let mut paint = |planes: &mut Vec<Vec<f64>>, p: &Patch| {
                    mask.iter_mut().for_each(|m| *m = 0.0);
                    splat(
                        &mut mask,
                        side,
                        res,
                        (p.x, p.y),
                        p.radius + res,
                        |dx, dy| {
                            let d = (dx * dx + dy * dy).sqrt();
                            (1.0 - (d - p.radius * 0.7) / (p.radius * 0.3)).clamp(0.0, 1.0)
                        },
                    );
                    for (i, m) in mask.iter().enumerate() {
                        if *m > 0.0 {
                            for (plane, c) in planes.iter_mut().zip(p.color) {
                                plane[i] = plane[i] * (1.0 - m) + c * m;
                            }
                        }
                    }
                };
                for p in &soil {
                    paint(&mut planes, p);
                }
                for &(x, y) in &centers {
                    paint(
                        &mut planes,
                        &Patch {
                            x,
                            y,
                            radius: 2.5,
                            color: midden,
                        },
                    );
                }
                let mut out = Vec::with_capacity(side * side * 3);
                for i in 0..side * side {
                    for plane in &planes {
                        out.push((plane[i] + noise.sample(&mut band_rng)).clamp(0.001, 1.0) as f32);
                    }
                }
                out
            }
            Band::Lidar => {
                let noise = Normal::new(0.0, 0.02).expect("noise");
                let mut grid = vec![0.0f64; side * side];
                for r in 0..side {
                    for c in 0..side {
                        let (x, y) = ((c as f64 + 0.5) * res, (r as f64 + 0.5) * res);
                        grid[r * side + c] =
                            2.0 + ground_waves.at(x, y) + noise.sample(&mut band_rng);
                    }
                }
                for &(x, y) in &centers {
                    splat(&mut grid, side, res, (x, y), 6.0, |dx, dy| {
                        0.25 * (-(dx * dx + dy * dy) / (2.0 * 1.5 * 1.5)).exp()
                    });
                }
                for m in &mounds {
                    let two_s2 = 2.0 * m.sigma * m.sigma;
                    splat(&mut grid, side, res, (m.x, m.y), 4.0 * m.sigma, |dx, dy| {
                        m.peak * (-(dx * dx + dy * dy) / two_s2).exp()
                    });
                }
                grid.into_iter().map(|v| v as f32).collect()
            }
        };
        let mut pixels = pixels;
        if cfg.void_strip_m > 0.0 && band != Band::Lidar {
            let ch = band.channels();
            let start = ((cfg.extent_m - cfg.void_strip_m) / res).floor().max(0.0) as usize;
            for r in 0..side {
                for c in start..side {
                    for k in 0..ch {
                        pixels[(r * side + c) * ch + k] = 0.0;
                    }
                }
            }
        }
        mosaics.push(Orthomosaic::new(band, res, side, side, (0.0, 0.0), pixels)?);
    }
    Ok((mosaics, MiddenRegistry { centers }))
}

/// Generates a site and runs [`super::prepare_tileset`] on it.
pub fn synthetic_tileset(cfg: &SiteConfig) -> Result<(Tileset, MiddenRegistry)> {
    let (mosaics, registry) = generate_synthetic_site(cfg)?;
    let tileset = super::prepare_tileset(&mosaics, cfg.crop, Some(&registry))?;
    Ok((tileset, registry))
}
