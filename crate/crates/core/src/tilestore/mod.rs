//! Tiles and tilesets: cropping orthomosaics into labeled multimodal
//! instances, thermal downshifting, sensor-void filtering and fusion.

mod io;
mod modality;
pub mod synth;

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub use io::{load_site, load_tileset, save_site, save_tileset, TILESET_FORMAT_VERSION};
pub use modality::{Band, Modality};

#[derive(Debug, Error)]
pub enum TilestoreError {
    #[error("invalid orthomosaic for {band}: {reason}")]
    InvalidMosaic { band: Band, reason: String },
    #[error("invalid crop geometry: {0}")]
    InvalidGeometry(String),
    #[error("orthomosaic extents differ: {}", format_extents(.extents))]
    ExtentMismatch { extents: Vec<(Band, Extent)> },
    #[error("crop geometry is not a whole number of pixels for {band} at {resolution_m} m/px ({detail})")]
    NonIntegerPixels {
        band: Band,
        resolution_m: f64,
        detail: String,
    },
    #[error("modality {0} is not present in the tileset")]
    MissingModality(Modality),
    #[error("unknown modality name {0:?}")]
    UnknownModality(String),
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error(
        "requested imbalance {requested} is infeasible; the site can reach at most {achievable:.5}"
    )]
    InfeasibleImbalance { requested: f64, achievable: f64 },
    #[error("could not place {count} middens with {separation_m} m separation")]
    Placement { count: usize, separation_m: f64 },
    #[error("tileset format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("{file} is truncated: expected {expected} bytes, found {actual}")]
    Truncated {
        file: String,
        expected: u64,
        actual: u64,
    },
    #[error("content digest mismatch: manifest {expected}, computed {actual}")]
    DigestMismatch { expected: String, actual: String },
    #[error("malformed tileset: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn format_extents(extents: &[(Band, Extent)]) -> String {
    extents
        .iter()
        .map(|(b, e)| format!("{b}=[{}, {}]x[{}, {}]", e.min_x, e.max_x, e.min_y, e.max_y))
        .collect::<Vec<_>>()
        .join("; ")
}

pub type Result<T> = std::result::Result<T, TilestoreError>;

/// World-space axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Extent {
    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    fn approx_eq(&self, other: &Extent) -> bool {
        const TOL: f64 = 1e-6;
        (self.min_x - other.min_x).abs() < TOL
            && (self.min_y - other.min_y).abs() < TOL
            && (self.max_x - other.max_x).abs() < TOL
            && (self.max_y - other.max_y).abs() < TOL
    }
}

/// A georeferenced raster for one sensor band. Row `r`, column `c` covers
/// world `[origin.x + c*res, +res) x [origin.y + r*res, +res)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Orthomosaic {
    pub band: Band,
    pub resolution_m: f64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub origin: (f64, f64),
    pub pixels: Vec<f32>,
}

impl Orthomosaic {
    pub fn new(
        band: Band,
        resolution_m: f64,
        height: usize,
        width: usize,
        origin: (f64, f64),
        pixels: Vec<f32>,
    ) -> Result<Self> {
        let mosaic = Self {
            band,
            resolution_m,
            height,
            width,
            channels: band.channels(),
            origin,
            pixels,
        };
        mosaic.validate()?;
        Ok(mosaic)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| TilestoreError::InvalidMosaic {
            band: self.band,
            reason,
        };
        if !(self.resolution_m > 0.0 && self.resolution_m.is_finite()) {
            return Err(fail(format!(
                "resolution {} must be positive",
                self.resolution_m
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(fail("raster must be at least 1x1".into()));
        }
        if self.channels != self.band.channels() {
            return Err(fail(format!(
                "expected {} channels, got {}",
                self.band.channels(),
                self.channels
            )));
        }
        if self.pixels.len() != self.height * self.width * self.channels {
            return Err(fail(format!(
                "pixel buffer holds {} values, expected {}",
                self.pixels.len(),
                self.height * self.width * self.channels
            )));
        }
        if self.pixels.iter().any(|v| !v.is_finite()) {
            return Err(fail("pixel values must be finite".into()));
        }
        Ok(())
    }

    pub fn extent(&self) -> Extent {
        Extent {
            min_x: self.origin.0,
            min_y: self.origin.1,
            max_x: self.origin.0 + self.width as f64 * self.resolution_m,
            max_y: self.origin.1 + self.height as f64 * self.resolution_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropGeometry {
    pub interval_m: f64,
    pub stride_m: f64,
}

impl Default for CropGeometry {
    fn default() -> Self {
        Self {
            interval_m: 20.0,
            stride_m: 5.0,
        }
    }
}

impl CropGeometry {
    pub fn new(interval_m: f64, stride_m: f64) -> Result<Self> {
        let g = Self {
            interval_m,
            stride_m,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval_m > 0.0 && self.interval_m.is_finite()) {
            return Err(TilestoreError::InvalidGeometry(format!(
                "interval {} must be positive",
                self.interval_m
            )));
        }
        if !(self.stride_m > 0.0 && self.stride_m.is_finite()) {
            return Err(TilestoreError::InvalidGeometry(format!(
                "stride {} must be positive",
                self.stride_m
            )));
        }
        if self.stride_m > self.interval_m {
            return Err(TilestoreError::InvalidGeometry(format!(
                "stride {} exceeds interval {}",
                self.stride_m, self.interval_m
            )));
        }
        Ok(())
    }

    /// Tiles along an axis of `length_m` meters.
    pub fn tiles_per_axis(&self, length_m: f64) -> usize {
        if length_m + 1e-9 < self.interval_m {
            return 0;
        }
        (((length_m - self.interval_m) / self.stride_m) + 1e-9).floor() as usize + 1
    }

    /// Side of a tile block in pixels at `resolution_m`, and the stride in pixels.
    pub fn pixels_at(&self, band: Band, resolution_m: f64) -> Result<(usize, usize)> {
        let side = whole_pixels(self.interval_m, resolution_m).ok_or_else(|| {
            TilestoreError::NonIntegerPixels {
                band,
                resolution_m,
                detail: format!("interval {} m", self.interval_m),
            }
        })?;
        let step = whole_pixels(self.stride_m, resolution_m).ok_or_else(|| {
            TilestoreError::NonIntegerPixels {
                band,
                resolution_m,
                detail: format!("stride {} m", self.stride_m),
            }
        })?;
        Ok((side, step))
    }

    /// Number of grid tiles whose square contains a given interior point:
    /// `ceil(interval / stride)^2`.
    pub fn overlap_factor(&self) -> usize {
        let per_axis = (self.interval_m / self.stride_m - 1e-9).ceil() as usize;
        per_axis * per_axis
    }
}

fn whole_pixels(meters: f64, resolution_m: f64) -> Option<usize> {
    let ratio = meters / resolution_m;
    let rounded = ratio.round();
    if rounded >= 1.0 && (ratio - rounded).abs() <= 1e-6 * rounded.max(1.0) {
        Some(rounded as usize)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Unlabeled,
    Positive,
    Negative,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn as_bool(self) -> Option<bool> {
        match self {
            Label::Positive => Some(true),
            Label::Negative => Some(false),
            Label::Unlabeled => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Unlabeled => "unlabeled",
            Label::Positive => "positive",
            Label::Negative => "negative",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Human,
    SimulatedOracle,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tile {
    pub id: usize,
    pub center: (f64, f64),
    pub label: Label,
    pub label_source: LabelSource,
    /// Amount subtracted from the thermal block by [`downshift_thermal`].
    pub thermal_shift: f32,
    pub metric_value: Option<f64>,
}

impl Tile {
    pub fn set_label(&mut self, label: Label, source: LabelSource) {
        self.label = label;
        self.label_source = if label == Label::Unlabeled {
            LabelSource::None
        } else {
            source
        };
    }
}

/// Pixel blocks of one modality for every tile, stored contiguously as
/// `N x H x W x C` row-major `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityStack {
    pub modality: Modality,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ModalityStack {
    pub fn block_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn block(&self, tile: usize) -> &[f32] {
        let n = self.block_len();
        &self.data[tile * n..(tile + 1) * n]
    }

    fn block_mut(&mut self, tile: usize) -> &mut [f32] {
        let n = self.block_len();
        &mut self.data[tile * n..(tile + 1) * n]
    }

    pub fn len(&self) -> usize {
        if self.block_len() == 0 {
            0
        } else {
            self.data.len() / self.block_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub positives: usize,
    pub negatives: usize,
    pub unlabeled: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub source_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovedTile {
    pub original_id: usize,
    pub center: (f64, f64),
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tileset {
    pub tiles: Vec<Tile>,
    pub stacks: Vec<ModalityStack>,
    pub crop: CropGeometry,
    pub provenance: Provenance,
    pub removal_log: Vec<RemovedTile>,
}

impl Tileset {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.stacks.iter().map(|s| s.modality).collect()
    }

    pub fn has(&self, modality: Modality) -> bool {
        self.stacks.iter().any(|s| s.modality == modality)
    }

    pub fn stack(&self, modality: Modality) -> Result<&ModalityStack> {
        self.stacks
            .iter()
            .find(|s| s.modality == modality)
            .ok_or(TilestoreError::MissingModality(modality))
    }

    fn stack_mut(&mut self, modality: Modality) -> Result<&mut ModalityStack> {
        self.stacks
            .iter_mut()
            .find(|s| s.modality == modality)
            .ok_or(TilestoreError::MissingModality(modality))
    }

    /// Pixel block of `tile` in `modality`.
    pub fn pixels(&self, tile: usize, modality: Modality) -> Result<&[f32]> {
        Ok(self.stack(modality)?.block(tile))
    }

    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for t in &self.tiles {
            match t.label {
                Label::Positive => c.positives += 1,
                Label::Negative => c.negatives += 1,
                Label::Unlabeled => c.unlabeled += 1,
            }
        }
        c
    }

    pub fn labels(&self) -> Vec<Label> {
        self.tiles.iter().map(|t| t.label).collect()
    }

    /// Keeps only the tiles for which `keep` is true, re-densifying ids.
    fn retain(&mut self, keep: &[bool]) {
        for stack in &mut self.stacks {
            let n = stack.block_len();
            let mut out = Vec::with_capacity(stack.data.len());
            for (i, chunk) in stack.data.chunks_exact(n).enumerate() {
                if keep[i] {
                    out.extend_from_slice(chunk);
                }
            }
            stack.data = out;
        }
        let mut tiles = Vec::with_capacity(self.tiles.len());
        for (i, t) in self.tiles.drain(..).enumerate() {
            if keep[i] {
                tiles.push(t);
            }
        }
        for (i, t) in tiles.iter_mut().enumerate() {
            t.id = i;
        }
        self.tiles = tiles;
    }
}

/// World coordinates of positive-object centers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiddenRegistry {
    pub centers: Vec<(f64, f64)>,
}

impl MiddenRegistry {
    pub fn validate_within(&self, extent: &Extent) -> Result<()> {
        for &(x, y) in &self.centers {
            if !extent.contains(x, y) {
                return Err(TilestoreError::Malformed(format!(
                    "registry center ({x}, {y}) lies outside the mosaic extent"
                )));
            }
        }
        Ok(())
    }
}

/// Crops co-registered mosaics into tiles on a `stride` grid. With a
/// registry, each tile is labeled positive iff some center lies in its
/// half-open square `[x0, x0+I) x [y0, y0+I)`; without one every tile is
/// unlabeled.
pub fn crop_orthomosaics(
    mosaics: &[Orthomosaic],
    geometry: CropGeometry,
    registry: Option<&MiddenRegistry>,
) -> Result<Tileset> {
    geometry.validate()?;
    let Some(first) = mosaics.first() else {
        return Err(TilestoreError::Malformed("no orthomosaics supplied".into()));
    };
    for m in mosaics {
        m.validate()?;
    }
    let extent = first.extent();
    if mosaics.iter().any(|m| !m.extent().approx_eq(&extent)) {
        return Err(TilestoreError::ExtentMismatch {
            extents: mosaics.iter().map(|m| (m.band, m.extent())).collect(),
        });
    }
    for (i, m) in mosaics.iter().enumerate() {
        if mosaics[..i].iter().any(|o| o.band == m.band) {
            return Err(TilestoreError::Malformed(format!(
                "duplicate {} mosaic",
                m.band
            )));
        }
    }
    let pixel_geometry = mosaics
        .iter()
        .map(|m| geometry.pixels_at(m.band, m.resolution_m))
        .collect::<Result<Vec<_>>>()?;
    if let Some(reg) = registry {
        reg.validate_within(&extent)?;
    }

    let nx = geometry.tiles_per_axis(extent.width());
    let ny = geometry.tiles_per_axis(extent.height());
    let count = nx * ny;

    let mut tiles = Vec::with_capacity(count);
    for j in 0..ny {
        for i in 0..nx {
            let x0 = extent.min_x + i as f64 * geometry.stride_m;
            let y0 = extent.min_y + j as f64 * geometry.stride_m;
            let (label, label_source) = match registry {
                Some(reg) => {
                    let inside = reg.centers.iter().any(|&(cx, cy)| {
                        cx >= x0
                            && cx < x0 + geometry.interval_m
                            && cy >= y0
                            && cy < y0 + geometry.interval_m
                    });
                    (Label::from_bool(inside), LabelSource::GroundTruth)
                }
                None => (Label::Unlabeled, LabelSource::None),
            };
            tiles.push(Tile {
                id: j * nx + i,
                center: (
                    x0 + geometry.interval_m / 2.0,
                    y0 + geometry.interval_m / 2.0,
                ),
                label,
                label_source,
                thermal_shift: 0.0,
                metric_value: None,
            });
        }
    }

    let mut stacks = Vec::with_capacity(mosaics.len());
    for (m, &(side, step)) in mosaics.iter().zip(&pixel_geometry) {
        let c = m.channels;
        let row_len = side * c;
        let mut data = Vec::with_capacity(count * side * row_len);
        for j in 0..ny {
            for i in 0..nx {
                let (r0, c0) = (j * step, i * step);
                for r in r0..r0 + side {
                    let start = (r * m.width + c0) * c;
                    data.extend_from_slice(&m.pixels[start..start + row_len]);
                }
            }
        }
        stacks.push(ModalityStack {
            modality: Modality::single(m.band),
            height: side,
            width: side,
            channels: c,
            data,
        });
    }
    stacks.sort_by_key(|s| s.modality);

    Ok(Tileset {
        tiles,
        stacks,
        crop: geometry,
        provenance: Provenance::default(),
        removal_log: Vec::new(),
    })
}

/// Shifts every thermal block so its minimum is exactly zero, accumulating
/// the subtracted amount in [`Tile::thermal_shift`].
pub fn downshift_thermal(tileset: &mut Tileset) -> Result<()> {
    let thermal = Modality::single(Band::Thermal);
    let stack = tileset.stack_mut(thermal)?;
    let mut shifts = Vec::with_capacity(stack.len());
    for t in 0..stack.len() {
        let block = stack.block_mut(t);
        let min = block.iter().copied().fold(f32::INFINITY, f32::min);
        if min != 0.0 && min.is_finite() {
            for v in block.iter_mut() {
                *v -= min;
            }
            shifts.push(min);
        } else {
            shifts.push(0.0);
        }
    }
    for (tile, s) in tileset.tiles.iter_mut().zip(shifts) {
        tile.thermal_shift += s;
    }
    Ok(())
}

/// Removes tiles whose thermal block (before downshifting) or RGB block is
/// entirely zero, i.e. sensor voids. Either band may be absent, not both.
pub fn filter_zero_tiles(tileset: &mut Tileset) -> Result<usize> {
    let thermal = tileset.stack(Modality::THERMAL).ok();
    let rgb = tileset.stack(Modality::RGB).ok();
    if thermal.is_none() && rgb.is_none() {
        return Err(TilestoreError::MissingModality(Modality::THERMAL));
    }
    let mut keep = vec![true; tileset.tiles.len()];
    let mut removed = Vec::new();
    for (i, tile) in tileset.tiles.iter().enumerate() {
        let thermal_void = thermal
            .is_some_and(|s| tile.thermal_shift == 0.0 && s.block(i).iter().all(|&v| v == 0.0));
        let rgb_void = rgb.is_some_and(|s| s.block(i).iter().all(|&v| v == 0.0));
        if thermal_void || rgb_void {
            keep[i] = false;
            let reason = match (thermal_void, rgb_void) {
                (true, true) => "thermal and rgb all zero",
                (true, false) => "thermal all zero",
                _ => "rgb all zero",
            };
            removed.push(RemovedTile {
                original_id: tile.id,
                center: tile.center,
                reason: reason.to_string(),
            });
        }
    }
    let n = removed.len();
    tileset.removal_log.extend(removed);
    tileset.retain(&keep);
    Ok(n)
}

/// The standard preparation: crop, downshift thermal, drop void tiles and
/// store the maximum-thermal-pixel metric on every tile.
pub fn prepare_tileset(
    mosaics: &[Orthomosaic],
    geometry: CropGeometry,
    registry: Option<&MiddenRegistry>,
) -> Result<Tileset> {
    let mut tileset = crop_orthomosaics(mosaics, geometry, registry)?;
    let has_thermal = tileset.has(Modality::THERMAL);
    if has_thermal {
        downshift_thermal(&mut tileset)?;
    }
    if has_thermal || tileset.has(Modality::RGB) {
        filter_zero_tiles(&mut tileset)?;
    }
    if has_thermal {
        let stack = tileset.stack(Modality::THERMAL)?;
        let maxima: Vec<f64> = (0..tileset.len())
            .map(|i| {
                stack
                    .block(i)
                    .iter()
                    .copied()
                    .fold(f32::NEG_INFINITY, f32::max) as f64
            })
            .collect();
        for (t, m) in tileset.tiles.iter_mut().zip(maxima) {
            t.metric_value = Some(m);
        }
    }
    Ok(tileset)
}

/// Resamples a square `src x src` single-channel plane to `dst x dst`:
/// block means when shrinking, nearest neighbour when enlarging.
fn resample_plane(
    src: &[f32],
    src_side: usize,
    dst_side: usize,
    channels: usize,
    channel: usize,
    out: &mut Vec<f64>,
) {
    out.clear();
    if src_side >= dst_side {
        for r in 0..dst_side {
            let (r0, r1) = (
                r * src_side / dst_side,
                ((r + 1) * src_side / dst_side).max(r * src_side / dst_side + 1),
            );
            for c in 0..dst_side {
                let (c0, c1) = (
                    c * src_side / dst_side,
                    ((c + 1) * src_side / dst_side).max(c * src_side / dst_side + 1),
                );
                let mut sum = 0.0f64;
                for rr in r0..r1 {
                    for cc in c0..c1 {
                        sum += src[(rr * src_side + cc) * channels + channel] as f64;
                    }
                }
                out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
            }
        }
    } else {
        for r in 0..dst_side {
            let rr = r * src_side / dst_side;
            for c in 0..dst_side {
                let cc = c * src_side / dst_side;
                out.push(src[(rr * src_side + cc) * channels + channel] as f64);
            }
        }
    }
}

/// Adds a fused modality blending `bands` with `weights` (equal by default)
/// on the thermal tile grid, or the coarsest source grid when thermal is
/// absent. Single-channel sources broadcast across RGB channels.
pub fn fuse_modalities(
    tileset: &mut Tileset,
    bands: &[Band],
    weights: Option<&[f64]>,
) -> Result<Modality> {
    let fused = Modality::from_bands(bands)
        .ok_or_else(|| TilestoreError::InvalidWeights("no bands to fuse".into()))?;
    let mut ordered: Vec<Band> = bands.to_vec();
    let weights: Vec<f64> = match weights {
        Some(w) => {
            if w.len() != bands.len() {
                return Err(TilestoreError::InvalidWeights(format!(
                    "{} weights for {} modalities",
                    w.len(),
                    bands.len()
                )));
            }
            w.to_vec()
        }
        None => vec![1.0 / bands.len() as f64; bands.len()],
    };
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(TilestoreError::InvalidWeights(
            "weights must be nonnegative".into(),
        ));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(TilestoreError::InvalidWeights(
            "weights must sum to 1".into(),
        ));
    }
    let mut pairs: Vec<(Band, f64)> = ordered.drain(..).zip(weights).collect();
    pairs.sort_by_key(|(b, _)| *b);
    for w in pairs.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(TilestoreError::InvalidWeights(format!(
                "{} listed twice",
                w[0].0
            )));
        }
    }
    let sources = pairs
        .iter()
        .map(|(b, _)| tileset.stack(Modality::single(*b)))
        .collect::<Result<Vec<_>>>()?;

    let thermal = Modality::single(Band::Thermal);
    let grid = match tileset.stack(thermal) {
        Ok(s) => s.height,
        Err(_) => sources.iter().map(|s| s.height).min().unwrap_or(1),
    };
    let out_channels = sources.iter().map(|s| s.channels).max().unwrap_or(1);
    let n = tileset.tiles.len();
    let plane = grid * grid;
    let mut data = vec![0.0f32; n * plane * out_channels];
    let mut acc = vec![0.0f64; plane * out_channels];
    let mut buf = Vec::with_capacity(plane);
    for t in 0..n {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (src, (_, w)) in sources.iter().zip(&pairs) {
            let block = src.block(t);
            for oc in 0..out_channels {
                let sc = if src.channels == 1 { 0 } else { oc };
                resample_plane(block, src.height, grid, src.channels, sc, &mut buf);
                for (p, v) in buf.iter().enumerate() {
                    acc[p * out_channels + oc] += w * v;
                }
            }
        }
        let out = &mut data[t * plane * out_channels..(t + 1) * plane * out_channels];
        for (o, a) in out.iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    let stack = ModalityStack {
        modality: fused,
        height: grid,
        width: grid,
        channels: out_channels,
        data,
    };
    if let Some(existing) = tileset.stacks.iter_mut().find(|s| s.modality == fused) {
        *existing = stack;
    } else {
        tileset.stacks.push(stack);
        tileset.stacks.sort_by_key(|s| s.modality);
    }
    Ok(fused)
}

/// Makes sure `modality` exists, fusing its bands with equal weights when
/// it is a fused modality not yet materialised.
pub fn ensure_modality(tileset: &mut Tileset, modality: Modality) -> Result<()> {
    if tileset.has(modality) {
        return Ok(());
    }
    if !modality.is_fused() {
        return Err(TilestoreError::MissingModality(modality));
    }
    fuse_modalities(tileset, &modality.bands(), None)?;
    Ok(())
}
