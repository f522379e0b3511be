//! IDX (MNIST) file reader.
//!
//! Layout: 4-byte big-endian magic (`0x00000803` images, `0x00000801`
//! labels), one big-endian `u32` per dimension, then raw `u8` payload.

use std::fs;
use std::path::Path;

use super::dataset::{Dataset, Label, LabelKind, Sample};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated { needed: at + 4, found: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

/// Image tensor: `count` images of `rows × cols` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    Ok(IdxImages { count, rows, cols, pixels: bytes[16..needed].to_vec() })
}

pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, LABELS_MAGIC)?;
    let count = be_u32(bytes, 4)? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated { needed, found: bytes.len() });
    }
    Ok(bytes[8..needed].to_vec())
}

pub fn encode_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Loads the first `limit` examples as training samples with pixels scaled to `[0, 1]`.
///
/// The class count is taken from the whole label file so that a small
/// `limit` does not shrink the output layer.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: usize) -> Result<Dataset> {
    let images = parse_images(&fs::read(images_path)?)?;
    let labels = parse_labels(&fs::read(labels_path)?)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch { images: images.count, labels: labels.len() });
    }
    let dim = images.rows * images.cols;
    let classes = labels.iter().copied().max().map_or(2, |m| (m as usize + 1).max(2));
    let train = images
        .pixels
        .chunks_exact(dim.max(1))
        .zip(&labels)
        .take(limit)
        .map(|(px, &l)| Sample {
            features: px.iter().map(|&b| b as f64 / 255.0).collect(),
            label: Label::Class(l as usize),
        })
        .collect();
    Ok(Dataset { train, test: Vec::new(), feature_dim: dim, label_kind: LabelKind::Class { classes } })
}
