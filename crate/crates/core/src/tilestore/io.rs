//! On-disk layouts.
//!
//! Tileset directory: `manifest.json`, `labels.csv`, and one `<modality>.f32`
//! blob per modality. Each blob starts with the magic `RQTS`, then
//! `version, N, H, W, C` as little-endian `u32`, then `N*H*W*C`
//! little-endian `f32` values. The manifest's `content_digest` is the
//! SHA-256 over every blob (manifest order) followed by `labels.csv`.
//!
//! Site directory (generator output): `site.json`, `middens.csv` and one
//! `<band>.mosaic.f32` per band with magic `RQOM` and `version, H, W, C`.

use super::{
    Band, CropGeometry, Label, LabelCounts, LabelSource, MiddenRegistry, Modality, ModalityStack,
    Orthomosaic, Provenance, RemovedTile, Result, Tile, Tileset, TilestoreError,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const TILESET_FORMAT_VERSION: u32 = 1;
const TILESET_MAGIC: &[u8; 4] = b"RQTS";
const MOSAIC_MAGIC: &[u8; 4] = b"RQOM";

#[derive(Debug, Serialize, Deserialize)]
struct StackEntry {
    name: Modality,
    file: String,
    height: usize,
    width: usize,
    channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tile_count: usize,
    modalities: Vec<StackEntry>,
    crop: CropGeometry,
    counts: LabelCounts,
    provenance: Provenance,
    content_digest: String,
    removal_log: Vec<RemovedTile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    id: usize,
    label: Label,
    source: LabelSource,
    center_x: f64,
    center_y: f64,
    thermal_shift: f32,
    metric_value: Option<f64>,
}

fn encode_blob(magic: &[u8; 4], dims: &[usize], data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * (dims.len() + 1) + data.len() * 4);
    out.extend_from_slice(magic);
    out.extend_from_slice(&TILESET_FORMAT_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn decode_blob(
    file: &str,
    bytes: &[u8],
    magic: &[u8; 4],
    ndims: usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let header = 8 + 4 * ndims;
    if bytes.len() < header {
        return Err(TilestoreError::Truncated {
            file: file.to_string(),
            expected: header as u64,
            actual: bytes.len() as u64,
        });
    }
    if &bytes[..4] != magic {
        return Err(TilestoreError::Malformed(format!("{file}: bad magic")));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != TILESET_FORMAT_VERSION {
        return Err(TilestoreError::VersionMismatch {
            found: version,
            expected: TILESET_FORMAT_VERSION,
        });
    }
    let dims: Vec<usize> = (1..=ndims).map(|i| word(i) as usize).collect();
    let count: usize = dims.iter().product();
    let expected = (header + count * 4) as u64;
    if bytes.len() as u64 != expected {
        return Err(TilestoreError::Truncated {
            file: file.to_string(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, data))
}

fn labels_csv(tiles: &[Tile]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for t in tiles {
        w.serialize(LabelRow {
            id: t.id,
            label: t.label,
            source: t.label_source,
            center_x: t.center.0,
            center_y: t.center.1,
            thermal_shift: t.thermal_shift,
            metric_value: t.metric_value,
        })
        .map_err(|e| TilestoreError::Malformed(e.to_string()))?;
    }
    w.into_inner()
        .map_err(|e| TilestoreError::Malformed(e.to_string()))
}

fn digest<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    hex::encode(h.finalize())
}

pub fn save_tileset(tileset: &Tileset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut blobs = Vec::with_capacity(tileset.stacks.len());
    let mut entries = Vec::with_capacity(tileset.stacks.len());
    for s in &tileset.stacks {
        let file = format!("{}.f32", s.modality.file_stem());
        blobs.push(encode_blob(
            TILESET_MAGIC,
            &[tileset.len(), s.height, s.width, s.channels],
            &s.data,
        ));
        entries.push(StackEntry {
            name: s.modality,
            file,
            height: s.height,
            width: s.width,
            channels: s.channels,
        });
    }
    let labels = labels_csv(&tileset.tiles)?;
    let content_digest = digest(
        blobs
            .iter()
            .map(|b| b.as_slice())
            .chain(std::iter::once(labels.as_slice())),
    );
    let manifest = Manifest {
        format_version: TILESET_FORMAT_VERSION,
        tile_count: tileset.len(),
        modalities: entries,
        crop: tileset.crop,
        counts: tileset.counts(),
        provenance: tileset.provenance.clone(),
        content_digest,
        removal_log: tileset.removal_log.clone(),
    };
    for (entry, blob) in manifest.modalities.iter().zip(&blobs) {
        fs::write(dir.join(&entry.file), blob)?;
    }
    fs::write(dir.join("labels.csv"), &labels)?;
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| TilestoreError::Malformed(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_tileset(dir: impl AsRef<Path>) -> Result<Tileset> {
    let dir = dir.as_ref();
    let raw = fs::read(dir.join("manifest.json"))?;
    let value: serde_json::Value = serde_json::from_slice(&raw)
        .map_err(|e| TilestoreError::Malformed(format!("manifest.json: {e}")))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .unwrap_or(0) as u32;
    if found != TILESET_FORMAT_VERSION {
        return Err(TilestoreError::VersionMismatch {
            found,
            expected: TILESET_FORMAT_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(value)
        .map_err(|e| TilestoreError::Malformed(format!("manifest.json: {e}")))?;

    let mut blobs = Vec::with_capacity(manifest.modalities.len());
    for entry in &manifest.modalities {
        blobs.push(fs::read(dir.join(&entry.file))?);
    }
    let labels = fs::read(dir.join("labels.csv"))?;

    // Structural problems (truncation, version) take precedence over the digest.
    let mut stacks = Vec::with_capacity(blobs.len());
    for (entry, bytes) in manifest.modalities.iter().zip(&blobs) {
        let (dims, data) = decode_blob(&entry.file, bytes, TILESET_MAGIC, 4)?;
        if dims
            != [
                manifest.tile_count,
                entry.height,
                entry.width,
                entry.channels,
            ]
        {
            return Err(TilestoreError::Malformed(format!(
                "{}: header dims {:?} disagree with manifest",
                entry.file, dims
            )));
        }
        stacks.push(ModalityStack {
            modality: entry.name,
            height: entry.height,
            width: entry.width,
            channels: entry.channels,
            data,
        });
    }
    let actual = digest(
        blobs
            .iter()
            .map(|b| b.as_slice())
            .chain(std::iter::once(labels.as_slice())),
    );
    if actual != manifest.content_digest {
        return Err(TilestoreError::DigestMismatch {
            expected: manifest.content_digest,
            actual,
        });
    }

    let mut reader = csv::Reader::from_reader(labels.as_slice());
    let mut tiles = Vec::with_capacity(manifest.tile_count);
    for (i, row) in reader.deserialize::<LabelRow>().enumerate() {
        let row = row.map_err(|e| TilestoreError::Malformed(format!("labels.csv: {e}")))?;
        if row.id != i {
            return Err(TilestoreError::Malformed(format!(
                "labels.csv: tile ids not dense at row {i}"
            )));
        }
        tiles.push(Tile {
            id: row.id,
            center: (row.center_x, row.center_y),
            label: row.label,
            label_source: row.source,
            thermal_shift: row.thermal_shift,
            metric_value: row.metric_value,
        });
    }
    if tiles.len() != manifest.tile_count {
        return Err(TilestoreError::Malformed(format!(
            "labels.csv holds {} tiles, manifest {}",
            tiles.len(),
            manifest.tile_count
        )));
    }
    let tileset = Tileset {
        tiles,
        stacks,
        crop: manifest.crop,
        provenance: manifest.provenance,
        removal_log: manifest.removal_log,
    };
    if tileset.counts() != manifest.counts {
        return Err(TilestoreError::Malformed(
            "label counts disagree with manifest".into(),
        ));
    }
    Ok(tileset)
}

#[derive(Debug, Serialize, Deserialize)]
struct MosaicEntry {
    band: Band,
    file: String,
    resolution_m: f64,
    height: usize,
    width: usize,
    channels: usize,
    origin: (f64, f64),
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteManifest {
    format_version: u32,
    seed: Option<u64>,
    mosaics: Vec<MosaicEntry>,
    middens: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct MiddenRow {
    x: f64,
    y: f64,
}

pub fn save_site(
    mosaics: &[Orthomosaic],
    registry: &MiddenRegistry,
    seed: Option<u64>,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for m in mosaics {
        let file = format!("{}.mosaic.f32", m.band);
        fs::write(
            dir.join(&file),
            encode_blob(MOSAIC_MAGIC, &[m.height, m.width, m.channels], &m.pixels),
        )?;
        entries.push(MosaicEntry {
            band: m.band,
            file,
            resolution_m: m.resolution_m,
            height: m.height,
            width: m.width,
            channels: m.channels,
            origin: m.origin,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for &(x, y) in &registry.centers {
        w.serialize(MiddenRow { x, y })
            .map_err(|e| TilestoreError::Malformed(e.to_string()))?;
    }
    fs::write(
        dir.join("middens.csv"),
        w.into_inner()
            .map_err(|e| TilestoreError::Malformed(e.to_string()))?,
    )?;
    let manifest = SiteManifest {
        format_version: TILESET_FORMAT_VERSION,
        seed,
        mosaics: entries,
        middens: registry.centers.len(),
    };
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| TilestoreError::Malformed(e.to_string()))?;
    fs::write(dir.join("site.json"), json)?;
    Ok(())
}

/// Loads a generator output directory: mosaics, registry and seed.
pub fn load_site(dir: impl AsRef<Path>) -> Result<(Vec<Orthomosaic>, MiddenRegistry, Option<u64>)> {
    let dir = dir.as_ref();
    let manifest: SiteManifest = serde_json::from_slice(&fs::read(dir.join("site.json"))?)
        .map_err(|e| TilestoreError::Malformed(format!("site.json: {e}")))?;
    if manifest.format_version != TILESET_FORMAT_VERSION {
        return Err(TilestoreError::VersionMismatch {
            found: manifest.format_version,
            expected: TILESET_FORMAT_VERSION,
        });
    }
    let mut mosaics = Vec::new();
    for e in manifest.mosaics {
        let bytes = fs::read(dir.join(&e.file))?;
        let (dims, pixels) = decode_blob(&e.file, &bytes, MOSAIC_MAGIC, 3)?;
        if dims != [e.height, e.width, e.channels] {
            return Err(TilestoreError::Malformed(format!(
                "{}: header disagrees with site.json",
                e.file
            )));
        }
        mosaics.push(Orthomosaic::new(
            e.band,
            e.resolution_m,
            e.height,
            e.width,
            e.origin,
            pixels,
        )?);
    }
    let raw = fs::read(dir.join("middens.csv"))?;
    let mut reader = csv::Reader::from_reader(raw.as_slice());
    let centers = reader
        .deserialize::<MiddenRow>()
        .map(|r| r.map(|r| (r.x, r.y)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| TilestoreError::Malformed(format!("middens.csv: {e}")))?;
    Ok((mosaics, MiddenRegistry { centers }, manifest.seed))
}

#[cfg(test)]
mod tests {
    use super::super::{crop_orthomosaics, downshift_thermal};
    use super::*;

    fn small_tileset() -> Tileset {
        let side = 60; // 30 m at 0.5 m -> 3x3 tiles with 5 m stride
        let px: Vec<f32> = (0..side * side)
            .map(|i| (i % 17) as f32 * 0.25 + 1.0)
            .collect();
        let t = Orthomosaic::new(Band::Thermal, 0.5, side, side, (100.0, 200.0), px).unwrap();
        let rgb_px: Vec<f32> = (0..side * side * 3)
            .map(|i| (i % 11) as f32 / 11.0)
            .collect();
        let r = Orthomosaic::new(Band::Rgb, 0.5, side, side, (100.0, 200.0), rgb_px).unwrap();
        let reg = MiddenRegistry {
            centers: vec![(112.5, 212.5)],
        };
        let mut ts = crop_orthomosaics(&[t, r], CropGeometry::default(), Some(&reg)).unwrap();
        downshift_thermal(&mut ts).unwrap();
        ts.provenance.seed = Some(42);
        ts.tiles[1].metric_value = Some(0.1 + 0.2);
        ts.tiles[2].set_label(Label::Unlabeled, LabelSource::None);
        ts
    }

    #[test]
    fn round_trip_identity() {
        let ts = small_tileset();
        assert_eq!(ts.len(), 9);
        let dir = tempfile::tempdir().unwrap();
        save_tileset(&ts, dir.path()).unwrap();
        let back = load_tileset(dir.path()).unwrap();
        assert_eq!(ts, back);
    }

    #[test]
    fn corrupted_pixels_is_digest_mismatch() {
        let ts = small_tileset();
        let dir = tempfile::tempdir().unwrap();
        save_tileset(&ts, dir.path()).unwrap();
        let path = dir.path().join("thermal.f32");
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 2;
        bytes[last] ^= 0x5a;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_tileset(dir.path()),
            Err(TilestoreError::DigestMismatch { .. })
        ));
    }

    #[test]
    fn truncated_blob_is_distinct() {
        let ts = small_tileset();
        let dir = tempfile::tempdir().unwrap();
        save_tileset(&ts, dir.path()).unwrap();
        let path = dir.path().join("rgb.f32");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            load_tileset(dir.path()),
            Err(TilestoreError::Truncated { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let ts = small_tileset();
        let dir = tempfile::tempdir().unwrap();
        save_tileset(&ts, dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            load_tileset(dir.path()),
            Err(TilestoreError::VersionMismatch { found: 9, .. })
        ));
    }

    #[test]
    fn blob_header_layout() {
        let ts = small_tileset();
        let dir = tempfile::tempdir().unwrap();
        save_tileset(&ts, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("rgb.f32")).unwrap();
        assert_eq!(&bytes[..4], b"RQTS");
        let words: Vec<u32> = bytes[4..24]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(words, vec![1, 9, 40, 40, 3]);
        assert_eq!(bytes.len(), 24 + 9 * 40 * 40 * 3 * 4);
    }

    #[test]
    fn site_round_trip() {
        let px: Vec<f32> = (0..40 * 40).map(|i| i as f32).collect();
        let t = Orthomosaic::new(Band::Thermal, 0.5, 40, 40, (0.0, 0.0), px).unwrap();
        let reg = MiddenRegistry {
            centers: vec![(3.25, 7.5)],
        };
        let dir = tempfile::tempdir().unwrap();
        save_site(std::slice::from_ref(&t), &reg, Some(3), dir.path()).unwrap();
        let (m, r, s) = load_site(dir.path()).unwrap();
        assert_eq!(m, vec![t]);
        assert_eq!(r, reg);
        assert_eq!(s, Some(3));
    }
}
