use super::LabeledDataset;
use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DSET";

/// Writes a labelled dataset as `DSET`: magic, u32 n, u32 C, H, W, u32 L,
/// n u32 labels, then pixels as f32, all little-endian.
pub fn write_dset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let labels = data.labels()?;
    let mut out = Vec::with_capacity(24 + 4 * (labels.len() + data.inputs.len()));
    out.extend_from_slice(MAGIC);
    for v in [data.len(), data.shape[0], data.shape[1], data.shape[2], data.class_count] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &y in labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    for &x in &data.inputs {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_dset(path: &Path) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::format("dset.magic", "expected `DSET`"));
    }
    let header: Vec<usize> = (0..5)
        .map(|i| {
            bytes
                .get(4 + 4 * i..8 + 4 * i)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
                .ok_or_else(|| Error::format("dset.header", "file ends inside the header"))
        })
        .collect::<Result<_>>()?;
    let (n, c, h, w, l) = (header[0], header[1], header[2], header[3], header[4]);
    let expect = 24 + 4 * n + 4 * n * c * h * w;
    if bytes.len() != expect {
        return Err(Error::format(
            "dset.payload",
            format!("expected {expect} bytes, found {}", bytes.len()),
        ));
    }
    let words = bytes[24..].chunks_exact(4).map(|b| [b[0], b[1], b[2], b[3]]);
    let labels: Vec<usize> = words.clone().take(n).map(|b| u32::from_le_bytes(b) as usize).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y >= l) {
        return Err(Error::format("dset.labels", format!("label {bad} with {l} classes")));
    }
    let inputs: Vec<f64> = words.skip(n).map(|b| f64::from(f32::from_le_bytes(b))).collect();
    if inputs.iter().any(|x| !x.is_finite()) {
        return Err(Error::format("dset.pixels", "non-finite value"));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dset".into());
    LabeledDataset::new(name, [c, h, w], inputs, Some(labels), l)
}
