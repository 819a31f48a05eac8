//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "DATN"
//! version u32      format version (currently 1)
//! len     u64      manifest byte length
//! manifest         JSON: model + train configs, seed, dtype,
//!                  parameter version counter, RNG states
//! count   u32      number of named parameters
//! entry*           name_len u32, name utf-8, dtype u8, rank u32,
//!                  dims u64 x rank, raw values little-endian
//! ```
//!
//! A reloaded checkpoint reproduces bit-identical forward outputs.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::TrainConfig;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DATN";
pub const FORMAT_VERSION: u32 = 1;

/// Data-order RNG state, enough to resume the training stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_lo: u64,
    pub word_pos_hi: u64,
}

impl RngState {
    pub fn from_word_pos(seed: u64, word_pos: u128) -> Self {
        RngState {
            seed,
            word_pos_lo: word_pos as u64,
            word_pos_hi: (word_pos >> 64) as u64,
        }
    }

    pub fn word_pos(&self) -> u128 {
        (u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub seed: u64,
    pub dtype: Dtype,
    pub param_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
}

/// Serialize a model (atomically: temp file + rename).
pub fn save_checkpoint<T: Scalar>(
    model: &Model<T>,
    train: Option<&TrainConfig>,
    rng: Option<RngState>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let manifest = CheckpointManifest {
        model: model.cfg.clone(),
        train: train.cloned(),
        seed: model.seed,
        dtype: T::DTYPE,
        param_version: model.param_version(),
        rng,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest_bytes);

    let mut entries: Vec<(String, Vec<u8>, Vec<u64>)> = Vec::new();
    model.for_each_param(|name, t| {
        entries.push((
            name.to_string(),
            T::to_le_bytes_vec(t.data()),
            t.shape().iter().map(|&d| d as u64).collect(),
        ));
    });
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, data, dims) in &entries {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(T::DTYPE.code());
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        buf.extend_from_slice(data);
    }

    let tmp = path.with_extension("datn.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Checkpoint(format!("truncated file while reading {what}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let b = read_exact(r, 8, what)?;
    Ok(u64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
}

/// Load a checkpoint saved with the same element type.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(Model<T>, CheckpointManifest)> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path)?;

    let magic = read_exact(&mut f, 4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = read_u32(&mut f, "format version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let manifest_len = read_u64(&mut f, "manifest length")? as usize;
    let manifest_bytes = read_exact(&mut f, manifest_len, "manifest")?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Checkpoint(format!("manifest parse error: {e}")))?;
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {:?}, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }

    // Rebuild the architecture (shadow inputs regenerate from the
    // manifest), then overwrite every parameter from the table.
    let mut model = Model::<T>::build(manifest.model.clone(), manifest.seed)?;

    let count = read_u32(&mut f, "parameter count")? as usize;
    let mut table = std::collections::HashMap::new();
    for _ in 0..count {
        let name_len = read_u32(&mut f, "name length")? as usize;
        let name = String::from_utf8(read_exact(&mut f, name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let code = read_exact(&mut f, 1, "dtype code")?[0];
        let dtype = Dtype::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "parameter {name} stored as {dtype:?}, requested {:?}",
                T::DTYPE
            )));
        }
        let rank = read_u32(&mut f, "rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut f, "dims")? as usize);
        }
        let numel: usize = dims.iter().product();
        let raw = read_exact(&mut f, numel * T::DTYPE.size_bytes(), &name)?;
        let data = T::from_le_bytes_vec(&raw)
            .ok_or_else(|| Error::Checkpoint(format!("bad value bytes for {name}")))?;
        table.insert(name, Tensor::new(dims, data)?);
    }
    let mut trailing = Vec::new();
    f.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameter table",
            trailing.len()
        )));
    }

    let mut missing = Vec::new();
    model.for_each_param_mut(|name, t| match table.remove(name) {
        Some(loaded) => {
            if loaded.shape() == t.shape() {
                *t = loaded;
            } else {
                missing.push(format!(
                    "{name}: shape {:?} != expected {:?}",
                    loaded.shape(),
                    t.shape()
                ));
            }
        }
        None => missing.push(format!("{name}: absent from checkpoint")),
    });
    if !missing.is_empty() {
        return Err(Error::Checkpoint(missing.join("; ")));
    }
    if !table.is_empty() {
        let extra: Vec<String> = table.keys().cloned().collect();
        return Err(Error::Checkpoint(format!(
            "unknown parameters in checkpoint: {}",
            extra.join(", ")
        )));
    }
    for _ in 0..manifest.param_version {
        model.bump_version();
    }
    Ok((model, manifest))
}
