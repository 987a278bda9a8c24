//! Reader and writer for the IDX container used by MNIST.
//!
//! Layout: a big-endian `u32` magic (2051 for images, 2049 for labels),
//! big-endian `u32` dimensions (`[n, rows, cols]` or `[n]`), then raw
//! unsigned bytes.

use std::fs;
use std::io;
use std::path::Path;

use super::data::Dataset;
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

/// Minimum class count assumed for digit labels.
const DIGIT_CLASSES: usize = 10;

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("truncated IDX {what}"),
    ))
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(what))
}

/// Parsed image file: `(rows, cols, pixels)` with `pixels.len() == n·rows·cols`.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = read_u32(bytes, 0, "image header")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(format!(
            "image file magic {magic}, expected {IMAGES_MAGIC}"
        )));
    }
    let n = read_u32(bytes, 4, "image header")? as usize;
    let rows = read_u32(bytes, 8, "image header")? as usize;
    let cols = read_u32(bytes, 12, "image header")? as usize;
    let len = n * rows * cols;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| truncated("image body"))?;
    Ok((n, rows, cols, body))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = read_u32(bytes, 0, "label header")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(format!(
            "label file magic {magic}, expected {LABELS_MAGIC}"
        )));
    }
    let n = read_u32(bytes, 4, "label header")? as usize;
    bytes.get(8..8 + n).ok_or_else(|| truncated("label body"))
}

/// Loads an image/label file pair. Pixels are scaled by 1/255 into `[0, 1]`
/// and `d = rows·cols`. The class count is the larger of 10 and
/// `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = fs::read(images_path)?;
    let lbl_bytes = fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_images(&img_bytes)?;
    let labels = parse_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::format(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    if n == 0 || rows * cols == 0 {
        return Err(Error::format("IDX file pair holds no samples"));
    }
    let features = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let k = labels
        .iter()
        .max()
        .map_or(DIGIT_CLASSES, |&m| (m + 1).max(DIGIT_CLASSES));
    Dataset::new(features, labels, rows * cols, k)
}

pub fn encode_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&pixels[..n * rows * cols]);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes an image file; `pixels` holds `n` images of `rows × cols` bytes.
pub fn write_images(path: impl AsRef<Path>, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_images(rows, cols, pixels))?;
    Ok(())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    fs::write(path, encode_labels(labels))?;
    Ok(())
}
