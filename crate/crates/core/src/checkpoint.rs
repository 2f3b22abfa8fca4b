//! Directory checkpoints: `manifest.json` (header + tensor index with
//! sha256 digests) next to one DVGTTEN1 file per tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use dvgt_tensor::{io, DType, Scalar, Tensor};

pub const CHECKPOINT_FORMAT: &str = "dvgt-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub dtype: String,
    /// Caller-defined header (model config, trainer state, ...).
    pub header: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn dtype_name(d: DType) -> &'static str {
    match d {
        DType::F32 => "f32",
        DType::F64 => "f64",
    }
}

fn file_name(k: usize, name: &str) -> String {
    let safe: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' { c } else { '_' }).collect();
    format!("tensors/{k:04}_{safe}.dvgt")
}

pub fn write_checkpoint<F: Scalar>(
    dir: &Path,
    header: serde_json::Value,
    tensors: &BTreeMap<String, Tensor<F>>,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut index = Vec::with_capacity(tensors.len());
    for (k, (name, t)) in tensors.iter().enumerate() {
        let bytes = io::encode(t);
        let file = file_name(k, name);
        fs::write(dir.join(&file), &bytes)?;
        index.push(TensorEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype: dtype_name(F::DTYPE).into(),
        header,
        tensors: index,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(Error::Data(format!("checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}", m.format)));
    }
    Ok(m)
}

pub fn read_checkpoint<F: Scalar>(dir: &Path) -> Result<(CheckpointManifest, BTreeMap<String, Tensor<F>>)> {
    let m = read_manifest(dir)?;
    if m.dtype != dtype_name(F::DTYPE) {
        return Err(Error::Data(format!("checkpoint holds {} tensors, requested {}", m.dtype, dtype_name(F::DTYPE))));
    }
    let mut out = BTreeMap::new();
    for e in &m.tensors {
        let bytes = fs::read(dir.join(&e.file)).map_err(|err| Error::Data(format!("{}: {err}", e.file)))?;
        if hex::encode(Sha256::digest(&bytes)) != e.sha256 {
            return Err(Error::Data(format!("checksum mismatch for {}", e.file)));
        }
        let t: Tensor<F> = io::decode(&bytes)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Data(format!("{} has shape {:?}, index says {:?}", e.name, t.shape(), e.shape)));
        }
        out.insert(e.name.clone(), t);
    }
    Ok((m, out))
}
