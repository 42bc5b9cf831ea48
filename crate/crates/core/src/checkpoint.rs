//! Checkpoint files: magic `GVRC`, u32 version, u32 dtype (0 = f32 LE,
//! 1 = f64 LE), u32 header length, a UTF-8 JSON header, then every tensor's
//! values in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::write_file;
use crate::error::{Error, Result};
use crate::optim::ParamGroup;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"GVRC";
pub const VERSION: u32 = 1;

/// Numeric width of stored and trained parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn code(self) -> u32 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    /// Rounds parameters to the storage width.
    pub fn apply(self, params: &mut ParamGroup) {
        if self == Precision::F32 {
            params.round_to_f32();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub lr_scale: f64,
    pub decay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    /// `"student"` or `"head"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    pub digest: String,
    pub tensors: Vec<TensorEntry>,
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_checkpoint(
    kind: &str,
    config: serde_json::Value,
    step: u64,
    seed: u64,
    digest: &str,
    params: &ParamGroup,
    precision: Precision,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        kind: kind.to_string(),
        config,
        step,
        seed,
        digest: digest.to_string(),
        tensors: params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                lr_scale: p.lr_scale,
                decay: p.decay,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + params.total_numel() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&precision.code().to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        for &v in p.value.data() {
            match precision {
                Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(CheckpointHeader, ParamGroup)> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(fmt_err(path, "not a checkpoint (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != VERSION {
        return Err(fmt_err(path, format!("unsupported checkpoint version {}", word(4))));
    }
    let width = match word(8) {
        0 => 4,
        1 => 8,
        other => return Err(fmt_err(path, format!("unknown dtype {other}"))),
    };
    let hlen = word(12) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| fmt_err(path, "truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    let mut offset = 16 + hlen;
    let mut params = ParamGroup::new();
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(offset..offset + n * width)
            .ok_or_else(|| fmt_err(path, format!("truncated data for tensor {}", e.name)))?;
        let data = raw
            .chunks_exact(width)
            .map(|c| {
                if width == 4 {
                    f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64
                } else {
                    f64::from_le_bytes(c.try_into().expect("8 bytes"))
                }
            })
            .collect();
        offset += n * width;
        params.insert(&e.name, Tensor::new(e.shape.clone(), data)?, e.lr_scale, e.decay)?;
    }
    if offset != bytes.len() {
        return Err(fmt_err(path, format!("{} trailing bytes", bytes.len() - offset)));
    }
    Ok((header, params))
}

#[allow(clippy::too_many_arguments)]
pub fn save_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    step: u64,
    seed: u64,
    digest: &str,
    params: &ParamGroup,
    precision: Precision,
) -> Result<()> {
    let bytes = encode_checkpoint(kind, config, step, seed, digest, params, precision)?;
    write_file(path, &bytes)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamGroup)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
