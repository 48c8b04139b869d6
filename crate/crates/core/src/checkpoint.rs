//! Binary checkpoint format.
//!
//! Layout: magic, version, JSON header (model config plus the recorded
//! hidden-state tap point), raw little-endian parameter blob in the fixed
//! enumeration order, then a SHA-256 of everything before the hash.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerWeights};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8; 4] = b"PCCT";
const VERSION: u32 = 1;

/// Where the exposed hidden state is taken from; recorded so a checkpoint
/// documents the convention its weights were trained under.
pub const HIDDEN_TAP: &str = "post_final_norm";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    hidden_tap: String,
}

/// Write a checkpoint; returns the hex content hash.
pub fn snapshot<S: Scalar>(weights: &TransformerWeights<S>, path: &Path) -> Result<String> {
    let bytes = encode(weights)?;
    let hash = hex(&Sha256::digest(&bytes));
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(hash)
}

fn encode<S: Scalar>(weights: &TransformerWeights<S>) -> Result<Vec<u8>> {
    let header = Header { config: weights.config.clone(), hidden_tap: HIDDEN_TAP.to_string() };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for t in weights.param_tensors() {
        out.extend_from_slice(&t.to_le_bytes());
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Read a checkpoint written at the same precision as `S`.
pub fn restore<S: Scalar>(path: &Path) -> Result<TransformerWeights<S>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 + 4 + 4 + 32 {
        return Err(Error::CheckpointTruncated("shorter than any valid file".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::CheckpointVersion { expected: VERSION, got: version });
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body_start = 12 + header_len;
    if bytes.len() < body_start + 32 {
        return Err(Error::CheckpointTruncated("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..body_start])?;
    let config = header.config;
    config.validate()?;
    if config.precision != S::PRECISION {
        return Err(Error::ConfigMismatch {
            field: "precision",
            expected: S::PRECISION.to_string(),
            found: config.precision.to_string(),
        });
    }

    let blob = &bytes[body_start..bytes.len() - 32];
    let expected_hash = &bytes[bytes.len() - 32..];
    let actual = Sha256::digest(&bytes[..bytes.len() - 32]);
    if actual.as_slice() != expected_hash {
        return Err(Error::CheckpointHash);
    }

    let shapes = param_shapes(&config);
    let expected_len: usize = shapes.iter().map(|&(r, c)| r * c * S::BYTES).sum();
    if blob.len() != expected_len {
        return Err(Error::CheckpointTruncated(format!(
            "parameter blob is {} bytes, config implies {expected_len}",
            blob.len()
        )));
    }

    let mut offset = 0usize;
    let mut read_tensor = |rows: usize, cols: usize| -> Tensor<S> {
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(S::read_le(&blob[offset + i * S::BYTES..]));
        }
        offset += n * S::BYTES;
        Tensor::new(rows, cols, data)
    };

    let mut weights = TransformerWeights::<S>::init(config.clone(), 0)?;
    for t in weights.param_tensors_mut() {
        *t = read_tensor(t.rows(), t.cols());
    }
    Ok(weights)
}

/// Restore and require the stored config to match `expected` exactly.
pub fn restore_expecting<S: Scalar>(
    path: &Path,
    expected: &ModelConfig,
) -> Result<TransformerWeights<S>> {
    let weights = restore::<S>(path)?;
    if &weights.config != expected {
        return Err(Error::ConfigMismatch {
            field: "model_config",
            expected: serde_json::to_string(expected)?,
            found: serde_json::to_string(&weights.config)?,
        });
    }
    Ok(weights)
}

/// Peek at the stored config without materializing weights.
pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::CheckpointMagic);
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::CheckpointTruncated("header extends past end of file".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    Ok(header.config)
}

fn param_shapes(config: &ModelConfig) -> Vec<(usize, usize)> {
    let (d, d_ff) = (config.d_model, config.d_ff);
    let mut shapes = vec![(config.vocab, d), (config.max_positions, d)];
    for _ in 0..config.layers {
        shapes.extend([
            (1, d), (1, d),                 // ln1
            (d, d), (1, d), (d, d), (1, d), // q, k
            (d, d), (1, d), (d, d), (1, d), // v, o
            (1, d), (1, d),                 // ln2
            (d, d_ff), (1, d_ff), (d_ff, d), (1, d), // ffn
        ]);
    }
    shapes.push((1, d));
    shapes.push((1, d));
    shapes
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
