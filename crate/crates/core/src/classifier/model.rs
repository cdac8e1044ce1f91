//! Single-file trained model: magic `RQMD`, `version` and JSON header
//! length as little-endian `u32`, the JSON header, then the current and
//! initial parameter vectors as little-endian `f64`.

use super::{ClassifierConfig, ClassifierError, ClassifierState, FeatureTable, Result};
use crate::tilestore::{Modality, Tileset};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"RQMD";
const VERSION: u32 = 1;

/// A trained classifier with the feature normalisation it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub modality: Modality,
    pub feature_scale: f32,
    pub classifier: ClassifierState,
}

impl ModelBundle {
    pub fn features(&self, tileset: &Tileset) -> Result<FeatureTable> {
        FeatureTable::build(
            tileset,
            self.modality,
            self.classifier.config().pool_grid,
            Some(self.feature_scale),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    modality: Modality,
    feature_scale: f32,
    input_dim: usize,
    param_count: usize,
    config: ClassifierConfig,
}

pub fn save_model(bundle: &ModelBundle, path: impl AsRef<Path>) -> Result<()> {
    let c = &bundle.classifier;
    let header = serde_json::to_vec(&Header {
        modality: bundle.modality,
        feature_scale: bundle.feature_scale,
        input_dim: c.input_dim(),
        param_count: c.params().len(),
        config: c.config().clone(),
    })
    .map_err(|e| ClassifierError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + header.len() + 16 * c.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in c.params().iter().chain(c.initial_snapshot()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(|e| ClassifierError::Format(e.to_string()))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| ClassifierError::Format(e.to_string()))?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(ClassifierError::Format("not a model file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(ClassifierError::Format(format!(
            "unsupported model version {version}"
        )));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(
        bytes
            .get(12..12 + hlen)
            .ok_or_else(|| ClassifierError::Format("truncated header".into()))?,
    )
    .map_err(|e| ClassifierError::Format(e.to_string()))?;
    let body = &bytes[12 + hlen..];
    if body.len() != 16 * header.param_count {
        return Err(ClassifierError::Format(format!(
            "expected {} parameter bytes, found {}",
            16 * header.param_count,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (params, initial) = values.split_at(header.param_count);
    let probe = ClassifierState::new(header.input_dim, header.config.clone())?;
    if probe.params().len() != header.param_count {
        return Err(ClassifierError::Format(
            "parameter count disagrees with architecture".into(),
        ));
    }
    Ok(ModelBundle {
        modality: header.modality,
        feature_scale: header.feature_scale,
        classifier: ClassifierState::from_parts(
            header.config,
            header.input_dim,
            params.to_vec(),
            initial.to_vec(),
        ),
    })
}
