//! Binary checkpoint format.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! "OICRCKPT"            8 bytes magic
//! version               1 byte (currently 1)
//! D, H, C, K            4 x u32
//! tensors               f32, row-major, in this order:
//!                         trunk[0].W (H x D), trunk[0].b (H)
//!                         trunk[1].W (H x H), trunk[1].b (H)
//!                         stream_c.W (C x H), stream_c.b (C)
//!                         stream_d.W (C x H), stream_d.b (C)
//!                         refine[k].W ((C+1) x H), refine[k].b (C+1)  for k = 1..K
//! crc32                 u32 over every preceding byte
//! ```
//!
//! Momentum buffers are not stored; a loaded model starts with zero velocity.

use std::path::Path;

use ndarray::{Array1, Array2};

use super::{DenseLayer, ModelDims, ModelParams};
use crate::error::{Error, Result};
use crate::io_util::write_atomic;

pub const MAGIC: &[u8; 8] = b"OICRCKPT";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8 + 1 + 16;

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let d = params.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * params.num_params() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for v in [d.feature_dim, d.hidden, d.num_classes, d.refinements] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in params.flatten() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelParams> {
    let format = |offset: usize, msg: &str| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(format(0, "bad magic, expected OICRCKPT"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            expected: HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes[8] != VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            offset: 8,
            expected: VERSION.to_string(),
            found: bytes[8].to_string(),
        });
    }
    let read_u32 = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let dims = ModelDims {
        feature_dim: read_u32(9),
        hidden: read_u32(13),
        num_classes: read_u32(17),
        refinements: read_u32(21),
    };
    dims.validate().map_err(|e| format(9, &e.to_string()))?;

    let mut params = empty_model(dims);
    let n = params.num_params();
    let expected = HEADER_LEN + 4 * n + 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() as u64,
            expected: expected as u64,
            found: bytes.len() as u64,
        });
    }
    if bytes.len() > expected {
        return Err(format(expected, "trailing bytes after checksum"));
    }
    let body = &bytes[..expected - 4];
    let stored = read_u32(expected - 4) as u32;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            offset: (expected - 4) as u64,
            stored,
            computed,
        });
    }
    let values: Vec<f64> = body[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    params.assign_flat(&values);
    Ok(params)
}

fn empty_model(d: ModelDims) -> ModelParams {
    let layer = |o, i| DenseLayer::from_parts(Array2::zeros((o, i)), Array1::zeros(o));
    ModelParams {
        trunk: [layer(d.hidden, d.feature_dim), layer(d.hidden, d.hidden)],
        stream_c: layer(d.num_classes, d.hidden),
        stream_d: layer(d.num_classes, d.hidden),
        refine: (0..d.refinements)
            .map(|_| layer(d.num_classes + 1, d.hidden))
            .collect(),
    }
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(params))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Rounds every parameter through f32, as a save/load cycle would.
pub fn quantize(params: &ModelParams) -> ModelParams {
    let mut out = params.without_velocity();
    let values: Vec<f64> = params.flatten().iter().map(|&v| v as f32 as f64).collect();
    out.assign_flat(&values);
    out
}
