//! Model bundle: a directory holding `manifest.json` (format version, config,
//! vocabularies, array shapes and offsets, checksum) and `params.bin`
//! (little-endian f64 arrays, back to back).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::config::TrainConfig;
use super::model::Model;
use crate::encoder::Vocab;
use crate::numcore::Tensor;
use crate::typology::{TypologyTable, TypologyVector};

pub const FORMAT: &str = "adaparse-bundle";
pub const FORMAT_VERSION: u64 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "params.bin";
const TYPOLOGY_PREFIX: &str = "typology.";

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bundle format version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: String },
    #[error("parameter blob checksum mismatch (file truncated or modified)")]
    Checksum,
    #[error("inconsistent bundle: {0}")]
    Format(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// In f64 elements from the start of the blob.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u64,
    config: TrainConfig,
    vocab: Vec<String>,
    labels: Vec<String>,
    languages: Vec<String>,
    typology_features: Option<Vec<String>>,
    arrays: Vec<ArrayEntry>,
    blob_bytes: usize,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BundleError + '_ {
    move |source| BundleError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `model` into directory `dir`, creating it if needed.
pub fn save_model(model: &Model, dir: impl AsRef<Path>) -> Result<(), BundleError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let mut arrays = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, t: &Tensor| {
        arrays.push(ArrayEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in &model.params {
        push(name.clone(), t);
    }
    for (code, v) in model.typology.iter() {
        let t = Tensor::new(vec![v.values().len()], v.values().to_vec()).expect("vector");
        push(format!("{TYPOLOGY_PREFIX}{code}"), &t);
    }

    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: FORMAT_VERSION,
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        labels: model.labels.clone(),
        languages: model.languages.clone(),
        typology_features: model.typology.feature_names().map(<[String]>::to_vec),
        arrays,
        blob_bytes: blob.len(),
        sha256: hex(&Sha256::digest(&blob)),
    };
    let blob_path = dir.join(BLOB);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let manifest_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<Model, BundleError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;

    // Check the version before anything else so that a newer layout gets a
    // clear message instead of a field error.
    let raw: serde_json::Value = serde_json::from_str(&text)?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(BundleError::Format("not a model bundle manifest".into()));
    }
    match raw.get("version") {
        Some(v) if v.as_u64() == Some(FORMAT_VERSION) => {}
        other => {
            return Err(BundleError::Version {
                found: other.map_or("missing".to_string(), |v| v.to_string()),
            })
        }
    }
    let manifest: Manifest = serde_json::from_value(raw)?;

    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if hex(&Sha256::digest(&blob)) != manifest.sha256 {
        return Err(BundleError::Checksum);
    }
    if blob.len() != manifest.blob_bytes || blob.len() % 8 != 0 {
        return Err(BundleError::Format("blob length disagrees with manifest".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let mut params = BTreeMap::new();
    let mut typology = TypologyTable::new();
    for a in &manifest.arrays {
        let len: usize = a.shape.iter().product();
        let data = values
            .get(a.offset..a.offset + len)
            .ok_or_else(|| BundleError::Format(format!("array {} out of range", a.name)))?;
        if let Some(code) = a.name.strip_prefix(TYPOLOGY_PREFIX) {
            let v = TypologyVector::new(data.to_vec()).map_err(|e| BundleError::Format(e.to_string()))?;
            typology
                .insert(code, v)
                .map_err(|e| BundleError::Format(e.to_string()))?;
        } else {
            let t = Tensor::new(a.shape.clone(), data.to_vec()).map_err(|e| BundleError::Format(e.to_string()))?;
            params.insert(a.name.clone(), t);
        }
    }
    if let Some(names) = manifest.typology_features {
        typology
            .set_feature_names(names)
            .map_err(|e| BundleError::Format(e.to_string()))?;
    }
    let vocab = Vocab::from_tokens(manifest.vocab).map_err(|e| BundleError::Format(e.to_string()))?;
    let model = Model {
        config: manifest.config,
        vocab,
        labels: manifest.labels,
        languages: manifest.languages,
        typology,
        params,
    };
    check_shapes(&model)?;
    Ok(model)
}

/// Every parameter group a freshly initialized model of this config would
/// have, with the same shapes.
fn check_shapes(model: &Model) -> Result<(), BundleError> {
    let enc = model.config.encoder();
    let dims = model.dims();
    let m = model.config.lang_dim;
    let mut expected: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    expected.insert(super::model::BACKBONE.into(), vec![enc.backbone_layout(model.vocab.len()).total()]);
    let ad = enc.adapter_layout().total();
    let bf = dims.layout().total();
    let mode = model.config.cpg_mode;
    if mode.generates_adapters() {
        expected.insert(super::model::GEN_ADAPTERS.into(), vec![ad, m]);
    } else {
        expected.insert(super::model::SHARED_ADAPTERS.into(), vec![ad]);
    }
    if mode.generates_biaffine() {
        expected.insert(super::model::GEN_BIAFFINE.into(), vec![bf, m]);
    } else {
        expected.insert(super::model::SHARED_BIAFFINE.into(), vec![bf]);
    }
    for (name, shape) in expected {
        match model.params.get(&name) {
            Some(t) if t.shape() == shape.as_slice() => {}
            Some(t) => {
                return Err(BundleError::Format(format!(
                    "{name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )))
            }
            None => return Err(BundleError::Format(format!("missing parameter group {name}"))),
        }
    }
    Ok(())
}
