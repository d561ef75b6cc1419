//! Binary checkpoint format, version 1, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "HYDRAVIT"
//! version   u32
//! length    u64      byte length of the manifest
//! manifest  UTF-8 JSON: dtype, model config, tensor names and shapes in
//!           payload order, optional training state
//! payload   raw tensor values, dtype-sized, in manifest order
//! checksum  32 bytes SHA-256 of everything before it
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{read_file, Normalization};
use crate::error::{DataError, Error, Result};
use crate::tensor::{DType, Float, Tensor};
use crate::trainer::{Moments, TrainConfig, TrainProgress};
use crate::vit::{ModelConfig, Params, UniversalWeights};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HYDRAVIT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MOMENT_PREFIXES: [&str; 2] = ["adamw.m.", "adamw.v."];
const HEADER_LEN: usize = 8 + 4 + 8;
const CHECKSUM_LEN: usize = 32;

/// Weights, optionally with everything needed to resume training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub weights: UniversalWeights<T>,
    pub moments: Option<Moments<T>>,
    pub progress: Option<TrainProgress>,
    pub train_config: Option<TrainConfig>,
    pub normalization: Option<Normalization>,
}

impl<T: Float> Checkpoint<T> {
    /// A weights-only checkpoint.
    pub fn weights_only(
        config: ModelConfig,
        weights: UniversalWeights<T>,
        normalization: Option<Normalization>,
    ) -> Self {
        Self { config, weights, moments: None, progress: None, train_config: None, normalization }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    dtype: DType,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    progress: Option<TrainProgress>,
    train_config: Option<TrainConfig>,
    normalization: Option<Normalization>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Data(DataError::Invalid(msg.into()))
}

pub fn encode_checkpoint<T: Float>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    ckpt.config.validate()?;
    ckpt.weights.check_layout(&ckpt.config)?;
    let mut tensors: Vec<(String, &Tensor<T>)> =
        ckpt.weights.entries().into_iter().map(|(info, t)| (info.name, t)).collect();
    if let Some(m) = &ckpt.moments {
        for (prefix, set) in MOMENT_PREFIXES.iter().zip([&m.m, &m.v]) {
            set.check_layout(&ckpt.config)?;
            tensors.extend(set.entries().into_iter().map(|(info, t)| (format!("{prefix}{}", info.name), t)));
        }
    }
    let manifest = Manifest {
        dtype: T::DTYPE,
        config: ckpt.config.clone(),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape().to_vec() }).collect(),
        progress: ckpt.progress.clone(),
        train_config: ckpt.train_config.clone(),
        normalization: ckpt.normalization.clone(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| invalid(e.to_string()))?;
    let payload: usize = tensors.iter().map(|(_, t)| t.numel()).sum::<usize>() * T::DTYPE.size_in_bytes();
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload + CHECKSUM_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for &v in t.data() {
            v.write_le(&mut out);
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(DataError::Truncated {
            what: "checkpoint".into(),
            expected: HEADER_LEN + CHECKSUM_LEN,
            actual: bytes.len(),
        }
        .into());
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(DataError::Format { offset: 0, msg: "not a checkpoint (bad magic)".into() }.into());
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DataError::Version { found: version, supported: CHECKPOINT_VERSION }.into());
    }
    let (body, checksum) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != checksum {
        return Err(DataError::Checksum.into());
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let json_end =
        (HEADER_LEN as u64).checked_add(json_len).filter(|&end| end <= body.len() as u64).ok_or_else(|| {
            DataError::Truncated {
                what: "checkpoint manifest".into(),
                expected: HEADER_LEN.saturating_add(json_len as usize),
                actual: body.len(),
            }
        })? as usize;
    let manifest: Manifest = serde_json::from_slice(&body[HEADER_LEN..json_end])
        .map_err(|e| DataError::Format { offset: HEADER_LEN, msg: format!("manifest: {e}") })?;
    if manifest.dtype != T::DTYPE {
        return Err(invalid(format!("stored as {:?}, requested {:?}", manifest.dtype, T::DTYPE)));
    }
    manifest.config.validate().map_err(|e| invalid(e.to_string()))?;

    let shapes = Params::shapes(&manifest.config);
    let mut expected: Vec<TensorEntry> =
        shapes.entries().into_iter().map(|(i, s)| TensorEntry { name: i.name, shape: s.clone() }).collect();
    let weight_count = expected.len();
    let has_moments = manifest.tensors.len() > weight_count;
    if has_moments {
        for prefix in MOMENT_PREFIXES {
            expected.extend(
                shapes
                    .entries()
                    .into_iter()
                    .map(|(i, s)| TensorEntry { name: format!("{prefix}{}", i.name), shape: s.clone() }),
            );
        }
    }
    if manifest.tensors.len() != expected.len() {
        return Err(invalid(format!("{} tensors listed, layout expects {}", manifest.tensors.len(), expected.len())));
    }
    for (have, want) in manifest.tensors.iter().zip(&expected) {
        if have != want {
            return Err(invalid(format!(
                "tensor {} {:?} does not match layout entry {} {:?}",
                have.name, have.shape, want.name, want.shape
            )));
        }
    }

    let size = T::DTYPE.size_in_bytes();
    let payload = &body[json_end..];
    let needed: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum::<usize>() * size;
    if payload.len() != needed {
        return Err(DataError::Truncated {
            what: "checkpoint payload".into(),
            expected: needed,
            actual: payload.len(),
        }
        .into());
    }
    let mut cursor = 0usize;
    let mut read_set = || -> Result<UniversalWeights<T>> {
        shapes.try_map(|_, shape| {
            let n: usize = shape.iter().product();
            let data = payload[cursor..cursor + n * size].chunks(size).map(T::read_le).collect();
            cursor += n * size;
            Ok(Tensor::new(shape.clone(), data)?)
        })
    };
    let weights = read_set()?;
    let moments = if has_moments { Some(Moments { m: read_set()?, v: read_set()? }) } else { None };
    Ok(Checkpoint {
        config: manifest.config,
        weights,
        moments,
        progress: manifest.progress,
        train_config: manifest.train_config,
        normalization: manifest.normalization,
    })
}

pub fn save_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let bytes = encode_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::Data(DataError::io(path, e)))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&read_file(path)?)
}

/// The element type a checkpoint was saved with.
pub fn checkpoint_dtype(bytes: &[u8]) -> Result<DType> {
    #[derive(Deserialize)]
    struct Peek {
        dtype: DType,
    }
    if bytes.len() < HEADER_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(DataError::Format { offset: 0, msg: "not a checkpoint (bad magic)".into() }.into());
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let end = HEADER_LEN.saturating_add(json_len).min(bytes.len());
    let peek: Peek = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| DataError::Format { offset: HEADER_LEN, msg: format!("manifest: {e}") })?;
    Ok(peek.dtype)
}
