//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `FLATLORA`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the UTF-8 JSON header,
//! then every tensor's values as little-endian `f64` in header order.
//! Payloads round-trip bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_model, Model, ModelSpec};
use crate::error::{Error, Result};
use crate::perturb::PerturbationRecord;

const MAGIC: &[u8; 8] = b"FLATLORA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub spec: ModelSpec,
    pub seed: u64,
    /// Free-form description of the data the model was trained on.
    #[serde(default)]
    pub dataset: Option<serde_json::Value>,
    pub tensors: Vec<TensorEntry>,
    /// Perturbations still applied when the checkpoint was taken.
    #[serde(default)]
    pub perturbations: Vec<PerturbationRecord>,
}

pub fn save(model: &Model, dataset: Option<serde_json::Value>, path: &Path) -> Result<()> {
    let header = Header {
        spec: model.spec.clone(),
        seed: model.seed,
        dataset,
        tensors: model.params.iter().map(|p| TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() }).collect(),
        perturbations: model.active.filters.values().cloned().collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for p in &model.params {
        for v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuilds the model from its spec and seed, then overwrites every tensor.
pub fn load(path: &Path) -> Result<(Model, Header)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::State(format!("{} is not a checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::State(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json)?;

    let mut model = build_model(&header.spec, header.seed)?;
    if header.tensors.len() != model.params.len() {
        return Err(Error::State("checkpoint tensor table does not match its spec".into()));
    }
    let mut buf = [0u8; 8];
    for (entry, p) in header.tensors.iter().zip(model.params.iter_mut()) {
        if entry.name != p.name || entry.shape != p.tensor.shape() {
            return Err(Error::State(format!("checkpoint entry {} does not match {}", entry.name, p.name)));
        }
        for v in p.tensor.data_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
    }
    if r.read(&mut buf)? != 0 {
        return Err(Error::State("trailing bytes after checkpoint payload".into()));
    }
    for rec in &header.perturbations {
        model.active.filters.insert(rec.layer_id.clone(), rec.clone());
    }
    Ok((model, header))
}
