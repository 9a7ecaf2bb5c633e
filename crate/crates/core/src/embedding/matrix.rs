use crate::error::{Error, Result};
use std::path::Path;

const MAGIC: &[u8; 4] = b"EMB1";

/// Where an embedding came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Autoencoder,
    Imported,
    /// Known generating coordinates of synthetic data.
    GroundTruth,
}

/// `n` latent vectors of dimension `d`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub n: usize,
    pub d: usize,
    pub rows: Vec<f64>,
    pub source: EmbeddingSource,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, rows: Vec<f64>, source: EmbeddingSource) -> Result<Self> {
        if rows.len() != n * d {
            return Err(Error::Dimension(format!("{} values for {n}×{d} embedding", rows.len())));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding contains a non-finite value".into()));
        }
        Ok(EmbeddingMatrix { n, d, rows, source })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    /// `EMB1` bytes: magic, u32 n, u32 d, then `n·d` f32 values, little-endian.
    /// Values are rounded to single precision.
    pub fn to_emb1(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.rows.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        for &v in &self.rows {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_emb1(bytes: &[u8]) -> Result<Self> {
        if bytes.get(..4) != Some(MAGIC) {
            return Err(Error::format("emb1.magic", "expected `EMB1`"));
        }
        let word = |at: usize, field: &str| -> Result<usize> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
                .ok_or_else(|| Error::format(field, "file ends inside the header"))
        };
        let n = word(4, "emb1.n")?;
        let d = word(8, "emb1.d")?;
        let payload = &bytes[12..];
        if payload.len() != 4 * n * d {
            return Err(Error::format(
                "emb1.payload",
                format!("header declares {n}×{d} values, payload holds {} bytes", payload.len()),
            ));
        }
        let rows: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect();
        if let Some(i) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::format("emb1.payload", format!("non-finite value at row {}", i / d.max(1))));
        }
        Ok(EmbeddingMatrix {
            n,
            d,
            rows,
            source: EmbeddingSource::Imported,
        })
    }

    pub fn export(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_emb1())?;
        Ok(())
    }
}

/// Reads an `EMB1` file.
pub fn import_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::from_emb1(&std::fs::read(path)?)
}
