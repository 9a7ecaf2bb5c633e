use super::LabeledDataset;
use crate::error::{Error, Result};
use std::path::Path;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, field: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(field, "file ends inside the header"))
}

/// Parses an IDX image file into `(count, rows, cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let magic = be_u32(bytes, 0, "images.magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(
            "images.magic",
            format!("expected {IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "images.count")? as usize;
    let rows = be_u32(bytes, 8, "images.rows")? as usize;
    let cols = be_u32(bytes, 12, "images.cols")? as usize;
    let body = &bytes[16..];
    let expect = n * rows * cols;
    if body.len() != expect {
        return Err(Error::format(
            "images.pixels",
            format!("expected {expect} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((n, rows, cols, body.iter().map(|&b| f64::from(b) / 255.0).collect()))
}

/// Parses an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "labels.magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(
            "labels.magic",
            format!("expected {LABELS_MAGIC:#010x}, found {magic:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4, "labels.count")? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::format(
            "labels.values",
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair as a `[1, rows, cols]` dataset with
/// ten classes.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&std::fs::read(images_path)?)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::format(
            "labels.count",
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= 10) {
        return Err(Error::format("labels.values", format!("label {bad} is not a digit")));
    }
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    LabeledDataset::new(name, [1, rows, cols], pixels, Some(labels), 10)
}
