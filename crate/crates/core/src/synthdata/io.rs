//! On-disk dataset layout.
//!
//! A dataset is a directory with two files:
//!
//! * `manifest.json`: version `"oicr-ds-1"`, class count, feature width, the
//!   CRC32 of `features.bin`, and one entry per image (proposal boxes, 0/1
//!   labels, ground truth).
//! * `features.bin`: the 8-byte magic `OICRFEAT` followed by little-endian
//!   f32 features, row-major, one row per proposal, images in manifest order.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Bag, Dataset, GroundTruthObject};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::io_util::write_atomic;

pub const FORMAT_VERSION: &str = "oicr-ds-1";
pub const FEATURE_MAGIC: &[u8; 8] = b"OICRFEAT";
const MANIFEST: &str = "manifest.json";
const FEATURES: &str = "features.bin";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: String,
    num_classes: usize,
    feature_dim: usize,
    features_crc32: u32,
    images: Vec<ImageEntry>,
}

#[derive(Serialize, Deserialize)]
struct ImageEntry {
    image_id: u64,
    num_proposals: usize,
    proposals: Vec<BBox>,
    labels: Vec<u8>,
    ground_truth: Vec<GroundTruthObject>,
}

pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let total_rows: usize = ds.bags.iter().map(Bag::num_proposals).sum();
    let mut payload = Vec::with_capacity(8 + 4 * total_rows * ds.feature_dim);
    payload.extend_from_slice(FEATURE_MAGIC);
    for bag in &ds.bags {
        assert_eq!(bag.features.dim(), (bag.num_proposals(), ds.feature_dim));
        for v in bag.features.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let manifest = Manifest {
        version: FORMAT_VERSION.to_string(),
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
        features_crc32: crc32fast::hash(&payload),
        images: ds
            .bags
            .iter()
            .map(|b| ImageEntry {
                image_id: b.image_id,
                num_proposals: b.num_proposals(),
                proposals: b.proposals.clone(),
                labels: b.labels.iter().map(|&y| y as u8).collect(),
                ground_truth: b.ground_truth.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");

    write_atomic(&dir.join(FEATURES), &payload)?;
    write_atomic(&dir.join(MANIFEST), &json)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        offset: byte_offset(&text, e.line(), e.column()),
        msg: e.to_string(),
    })?;
    if manifest.version != FORMAT_VERSION {
        let offset = find(&text, b"\"version\"").unwrap_or(0);
        return Err(Error::Version {
            path: manifest_path,
            offset: offset as u64,
            expected: FORMAT_VERSION.to_string(),
            found: manifest.version,
        });
    }

    let feat_path = dir.join(FEATURES);
    let payload = fs::read(&feat_path).map_err(|e| Error::io(&feat_path, e))?;
    if payload.len() < 8 || &payload[..8] != FEATURE_MAGIC {
        return Err(Error::Format {
            path: feat_path,
            offset: 0,
            msg: "bad magic, expected OICRFEAT".into(),
        });
    }
    let d = manifest.feature_dim;
    let total_rows: usize = manifest.images.iter().map(|i| i.num_proposals).sum();
    let expected = 8 + 4 * total_rows * d;
    if payload.len() < expected {
        return Err(Error::Truncated {
            path: feat_path,
            offset: payload.len() as u64,
            expected: expected as u64,
            found: payload.len() as u64,
        });
    }
    if payload.len() > expected {
        return Err(Error::Format {
            path: feat_path,
            offset: expected as u64,
            msg: "trailing bytes after feature payload".into(),
        });
    }
    let computed = crc32fast::hash(&payload);
    if computed != manifest.features_crc32 {
        return Err(Error::Checksum {
            path: feat_path,
            offset: 0,
            stored: manifest.features_crc32,
            computed,
        });
    }

    let mut floats = payload[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let mut bags = Vec::with_capacity(manifest.images.len());
    for img in manifest.images {
        if img.proposals.len() != img.num_proposals || img.labels.len() != manifest.num_classes {
            return Err(Error::Format {
                path: manifest_path,
                offset: 0,
                msg: format!(
                    "image {} has inconsistent proposal or label counts",
                    img.image_id
                ),
            });
        }
        let values: Vec<f32> = floats.by_ref().take(img.num_proposals * d).collect();
        let features = Array2::from_shape_vec((img.num_proposals, d), values).expect("sized above");
        bags.push(Bag {
            image_id: img.image_id,
            proposals: img.proposals,
            features,
            labels: img.labels.iter().map(|&y| y != 0).collect(),
            ground_truth: img.ground_truth,
        });
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        feature_dim: d,
        bags,
    })
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> u64 {
    let line_start: usize = text
        .split(|&b| b == b'\n')
        .take(line.saturating_sub(1))
        .map(|l| l.len() + 1)
        .sum();
    (line_start + column.saturating_sub(1)) as u64
}
