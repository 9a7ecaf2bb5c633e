use super::LabeledDataset;
use crate::embedding::{EmbeddingMatrix, EmbeddingSource};
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Minimum distance between blob centres, in units of the unscaled space.
const MIN_SEPARATION: f64 = 4.0;

/// `k` Gaussian blobs of `per_cluster` points each in `d` dimensions.
///
/// Returns the blobs twice: as a dataset of shape `[1, 1, d]` (coordinates
/// min-max scaled into `[0, 1]`, labels = blob index) and as the raw
/// coordinates in an embedding matrix. Examples are ordered blob by blob.
pub fn synth_blobs(
    k: usize,
    per_cluster: usize,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<(LabeledDataset, EmbeddingMatrix)> {
    if k < 2 {
        return Err(Error::Parameter(format!("need at least 2 blobs, got {k}")));
    }
    if per_cluster == 0 || d == 0 {
        return Err(Error::Parameter("blob size and dimension must be positive".into()));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::Parameter(format!("spread {spread}")));
    }
    let mut rng = crate::rng::rng(seed);
    let side = 8.0 * k as f64;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut attempts = 0;
    while centers.len() < k {
        let c: Vec<f64> = (0..d).map(|_| rng.random_range(0.0..side)).collect();
        let far = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= MIN_SEPARATION.powi(2)
        });
        attempts += 1;
        if far || attempts > 10_000 {
            centers.push(c);
        }
    }
    let mut rows = Vec::with_capacity(k * per_cluster * d);
    let mut labels = Vec::with_capacity(k * per_cluster);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_cluster {
            for &m in center {
                let z: f64 = rng.sample(StandardNormal);
                rows.push(m + spread * z);
            }
            labels.push(c);
        }
    }
    let lo = rows.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = rows.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let inputs = rows
        .iter()
        .map(|&x| if range > 0.0 { (x - lo) / range } else { 0.0 })
        .collect();
    let data = LabeledDataset::new("blobs", [1, 1, d], inputs, Some(labels), k)?;
    let emb = EmbeddingMatrix::new(k * per_cluster, d, rows, EmbeddingSource::GroundTruth)?;
    Ok((data, emb))
}
