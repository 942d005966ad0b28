//! Model bundles: a directory holding `manifest.json` and `params.bin`
//! (little-endian f64 tensors in manifest order, CRC32 per tensor).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelMeta};
use crate::params::ParamStore;
use crate::trainer::{FitReport, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub crc32: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub formula: String,
    pub config: ModelConfig,
    pub meta: ModelMeta,
    pub train_config: Option<TrainConfig>,
    pub fit: Option<FitReport>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything saved with a model.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub fit: Option<FitReport>,
}

fn tensor_bytes(t: &Tensor<f64>) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes `bytes` next to `path` and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_model(state: &ModelState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bin = Vec::with_capacity(state.model.params.numel() * 8);
    let mut tensors = Vec::with_capacity(state.model.params.len());
    for (name, t) in state.model.params.iter() {
        let bytes = tensor_bytes(t);
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bin.len(),
            crc32: crc32fast::hash(&bytes),
        });
        bin.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        formula: state.model.config.formula.clone(),
        config: state.model.config.clone(),
        meta: state.model.meta.clone(),
        train_config: state.train_config.clone(),
        fit: state.fit.clone(),
        tensors,
    };
    write_atomic(&dir.join(PARAMS), &bin)?;
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let found = value.get("format_version").and_then(serde_json::Value::as_u64).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let mut m: Manifest = serde_json::from_value(value)?;
    m.meta.vocab.reindex();
    m.meta.target_levels.iter_mut().flatten().for_each(|l| l.reindex());
    Ok(m)
}

pub fn load_model(dir: &Path) -> Result<ModelState> {
    let manifest = read_manifest(dir)?;
    let path = dir.join(PARAMS);
    let bin = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let len = e.shape.iter().product::<usize>() * 8;
        let bytes = bin
            .get(e.offset..e.offset + len)
            .ok_or_else(|| Error::Data(format!("params.bin is too short for tensor {:?}", e.name)))?;
        if crc32fast::hash(bytes) != e.crc32 {
            return Err(Error::Checksum(e.name.clone()));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store.insert(&e.name, Tensor::new(e.shape.clone(), data)?)?;
    }
    if manifest.formula != manifest.config.formula {
        return Err(Error::Model("manifest formula disagrees with its config".into()));
    }
    let mut reference = Model::assemble(manifest.config.clone(), manifest.meta.clone(), None)?;
    reference.init_params(&[], &mut crate::rng(0))?;
    for (name, t) in reference.params.iter() {
        let got = store
            .get(name)
            .ok_or_else(|| Error::Model(format!("tensor {name:?} missing from the manifest")))?;
        if got.shape() != t.shape() {
            return Err(Error::Model(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                got.shape(),
                t.shape()
            )));
        }
    }
    let model = Model::assemble(manifest.config, manifest.meta, Some(store))?;
    Ok(ModelState {
        model,
        train_config: manifest.train_config,
        fit: manifest.fit,
    })
}
