//! The IDX binary format used to distribute MNIST.
//!
//! Big-endian throughout. Image files start with magic `0x00000803`, the
//! image count, rows and columns, then one unsigned byte per pixel. Label
//! files start with magic `0x00000801` and the label count, then one byte per
//! label. Gzip-compressed files (as MNIST is usually shipped) are detected by
//! their header and inflated transparently.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| truncated(path, "header"))
}

fn truncated(path: &Path, what: &str) -> Error {
    Error::Io(std::io::Error::new(
        std::io::ErrorKind::UnexpectedEof,
        format!("{}: truncated {what}", path.display()),
    ))
}

/// Parses an IDX image file into (count, rows, cols, pixels).
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(path, format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let need = count * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(truncated(path, "pixel data"));
    }
    Ok((count, rows, cols, body[..need].to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(path, format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(truncated(path, "label data"));
    }
    Ok(body[..count].to_vec())
}

/// Loads an image/label IDX pair. Pixels are scaled by 1/255 into [0, 1];
/// the class count is one more than the largest label (at least 10 when the
/// images are 28×28, so MNIST subsets missing a digit keep ten classes).
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let (count, rows, cols, pixels) = read_idx_images(images)?;
    let raw_labels = read_idx_labels(labels)?;
    if raw_labels.len() != count {
        return Err(Error::Consistency(format!(
            "{} holds {count} images but {} holds {} labels",
            images.display(),
            labels.display(),
            raw_labels.len()
        )));
    }
    let features: Vec<f64> = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels: Vec<usize> = raw_labels.iter().map(|&l| usize::from(l)).collect();
    let mut classes = labels.iter().max().map_or(0, |&m| m + 1);
    if rows == 28 && cols == 28 {
        classes = classes.max(10);
    }
    let name = images
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::new(name, Tensor::matrix(count, rows * cols, features)?, labels, classes)?
        .with_image_shape((rows, cols, 1))
}

/// Writes raw IDX (uncompressed) image and label files.
pub fn write_idx(
    images: impl AsRef<Path>,
    labels: impl AsRef<Path>,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    label_bytes: &[u8],
) -> Result<()> {
    let count = label_bytes.len();
    if pixels.len() != count * rows * cols {
        return Err(Error::Consistency(format!(
            "{} pixels do not make {count} images of {rows}x{cols}",
            pixels.len()
        )));
    }
    let mut w = BufWriter::new(File::create(images)?);
    w.write_all(&IMAGE_MAGIC.to_be_bytes())?;
    for v in [count, rows, cols] {
        w.write_all(&(v as u32).to_be_bytes())?;
    }
    w.write_all(pixels)?;
    w.flush()?;

    let mut w = BufWriter::new(File::create(labels)?);
    w.write_all(&LABEL_MAGIC.to_be_bytes())?;
    w.write_all(&(count as u32).to_be_bytes())?;
    w.write_all(label_bytes)?;
    w.flush()?;
    Ok(())
}
