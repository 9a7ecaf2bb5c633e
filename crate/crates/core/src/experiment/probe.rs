use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use std::path::Path;

/// Shared-representation distances of one example pair under two models.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub i: usize,
    pub j: usize,
    pub dist_a: f64,
    pub dist_b: f64,
}

/// Reads `i,j` pairs, one per line. A non-numeric first line is taken as a
/// header and skipped.
pub fn read_pairs(text: &str) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed = line
            .split_once(',')
            .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
        match parsed {
            Some(p) => pairs.push(p),
            None if n == 0 => continue,
            None => return Err(Error::format(format!("pairs line {}", n + 1), format!("`{line}` is not `i,j`"))),
        }
    }
    Ok(pairs)
}

/// A directory is read as MNIST and yields its test split; any other path is
/// read as a `DSET` file.
pub fn load_probe_dataset(path: &Path) -> Result<LabeledDataset> {
    if path.is_dir() {
        data::load_mnist_idx(&path.join("t10k-images-idx3-ubyte"), &path.join("t10k-labels-idx1-ubyte"))
    } else {
        data::read_dset(path)
    }
}

fn distances(model: &ModelParams, data: &LabeledDataset, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    let mut idx: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
    idx.sort_unstable();
    idx.dedup();
    let h = model.shared_output(&data.batch(&idx)?)?;
    let width = h.shape()[1];
    let row = |i: usize| {
        let r = idx.binary_search(&i).expect("collected above");
        &h.data()[r * width..(r + 1) * width]
    };
    Ok(pairs
        .iter()
        .map(|&(i, j)| row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect())
}

/// Euclidean distances between shared-encoder outputs of each pair, under
/// model `a` and model `b`.
pub fn ambiguity_probe(
    a: &ModelParams,
    b: &ModelParams,
    data: &LabeledDataset,
    pairs: &[(usize, usize)],
) -> Result<Vec<ProbeRow>> {
    if a.arch != b.arch {
        return Err(Error::Comparison("checkpoints have different architectures".into()));
    }
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= data.len() || j >= data.len()) {
        return Err(Error::Data(format!("pair ({i}, {j}) outside {} examples", data.len())));
    }
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let da = distances(a, data, pairs)?;
    let db = distances(b, data, pairs)?;
    Ok(pairs
        .iter()
        .zip(da.into_iter().zip(db))
        .map(|(&(i, j), (dist_a, dist_b))| ProbeRow { i, j, dist_a, dist_b })
        .collect())
}
