//! Auxiliary task construction: cluster randomly transformed copies of an
//! embedding and use the cluster ids as labels.

mod kmeans;
mod nmi;

pub use kmeans::{kmeans, KMeansResult};
pub use nmi::cluster_nmi;

use crate::data::LabeledDataset;
use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive, rng};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Iteration cap and relative-improvement threshold for k-means.
pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// Multiply dimension `j` by `s_j ~ U(0, 1)`.
    RandomScaling,
    /// Keep `⌊d/2⌋` dimensions chosen uniformly.
    HalfDims,
}

impl TransformKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformKind::RandomScaling => "random_scaling",
            TransformKind::HalfDims => "half_dims",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformMode {
    pub kind: TransformKind,
    pub seed: u64,
}

/// The per-dimension factors used by `RandomScaling` with `seed`.
pub fn scaling_factors(d: usize, seed: u64) -> Vec<f64> {
    let mut r = rng(seed);
    (0..d).map(|_| r.random::<f64>()).collect()
}

/// The sorted dimensions kept by `HalfDims` with `seed`.
pub fn half_dims_mask(d: usize, seed: u64) -> Result<Vec<usize>> {
    if d < 2 {
        return Err(Error::Parameter(format!("cannot keep half of {d} dimension(s)")));
    }
    let mut dims = sample(&mut rng(seed), d, d / 2).into_vec();
    dims.sort_unstable();
    Ok(dims)
}

/// Keeps only the listed columns.
pub fn project(z: &EmbeddingMatrix, dims: &[usize]) -> Result<EmbeddingMatrix> {
    if let Some(&j) = dims.iter().find(|&&j| j >= z.d) {
        return Err(Error::Index(format!("dimension {j} of {}", z.d)));
    }
    let rows = (0..z.n)
        .flat_map(|i| dims.iter().map(move |&j| z.row(i)[j]))
        .collect();
    EmbeddingMatrix::new(z.n, dims.len(), rows, z.source)
}

/// Multiplies column `j` by `factors[j]`.
pub fn scale_columns(z: &EmbeddingMatrix, factors: &[f64]) -> Result<EmbeddingMatrix> {
    if factors.len() != z.d {
        return Err(Error::Dimension(format!("{} factors for {} dimensions", factors.len(), z.d)));
    }
    let rows = z
        .rows
        .chunks(z.d)
        .flat_map(|r| r.iter().zip(factors).map(|(x, s)| x * s))
        .collect();
    EmbeddingMatrix::new(z.n, z.d, rows, z.source)
}

pub fn transform_embedding(z: &EmbeddingMatrix, mode: TransformMode) -> Result<EmbeddingMatrix> {
    match mode.kind {
        TransformKind::RandomScaling => scale_columns(z, &scaling_factors(z.d, mode.seed)),
        TransformKind::HalfDims => project(z, &half_dims_mask(z.d, mode.seed)?),
    }
}

/// One clustering of the examples, used as an auxiliary labelling.
#[derive(Clone, Debug, PartialEq)]
pub struct Partition {
    pub assignments: Vec<usize>,
    pub k: usize,
    /// `k × d` in the transformed space; empty for random labellings.
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// `None` for uniformly random labellings.
    pub transform: Option<TransformMode>,
    pub seed: u64,
}

impl Partition {
    /// Header `k=<k>,transform=<kind>,seed=<seed>` then one
    /// `example_index,cluster_id` line per example.
    pub fn to_text(&self) -> String {
        let kind = self.transform.map_or("random_labels", |m| m.kind.as_str());
        let mut s = format!("k={},transform={},seed={}\n", self.k, kind, self.seed);
        for (i, c) in self.assignments.iter().enumerate() {
            writeln!(s, "{i},{c}").expect("writing to a String");
        }
        s
    }

    pub fn export(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// `t_count` partitions of `z`. Partition `t` transforms with seed
/// `seed ^ t` and seeds k-means from a stream derived from that.
pub fn make_partitions(
    z: &EmbeddingMatrix,
    t_count: usize,
    k: usize,
    kind: TransformKind,
    seed: u64,
) -> Result<Vec<Partition>> {
    if t_count == 0 {
        return Err(Error::Parameter("at least one partition is required".into()));
    }
    (0..t_count as u64)
        .map(|t| {
            let mode = TransformMode { kind, seed: seed ^ t };
            let zt = transform_embedding(z, mode)?;
            let km = kmeans(&zt, k, KMEANS_MAX_ITER, KMEANS_TOL, derive(mode.seed, 1))?;
            Ok(Partition {
                assignments: km.assignments,
                k,
                centroids: km.centroids,
                inertia: km.inertia,
                transform: Some(mode),
                seed: mode.seed,
            })
        })
        .collect()
}

/// A labelling with each example's cluster drawn uniformly from `0..k`.
pub fn random_partition(n: usize, k: usize, seed: u64) -> Result<Partition> {
    if k < 2 {
        return Err(Error::Parameter(format!("k = {k}; at least 2 classes are required")));
    }
    let mut r = rng(seed);
    Ok(Partition {
        assignments: (0..n).map(|_| r.random_range(0..k)).collect(),
        k,
        centroids: Vec::new(),
        inertia: 0.0,
        transform: None,
        seed,
    })
}

/// An auxiliary task: pseudo-labels over the examples of a source dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub num_classes: usize,
    pub pseudo_labels: Vec<usize>,
}

impl TaskDataset {
    /// The source inputs paired with the pseudo-labels.
    pub fn dataset(&self, source: &LabeledDataset) -> Result<LabeledDataset> {
        let mut d = source.with_labels(self.pseudo_labels.clone(), self.num_classes)?;
        d.name = format!("{}/aux{}", source.name, self.task_id);
        Ok(d)
    }
}

pub fn partition_to_task(p: &Partition, data: &LabeledDataset, task_id: usize) -> Result<TaskDataset> {
    if p.assignments.len() != data.len() {
        return Err(Error::Data(format!(
            "partition covers {} examples, dataset has {}",
            p.assignments.len(),
            data.len()
        )));
    }
    if p.k < 2 {
        return Err(Error::Parameter(format!("task with {} classes", p.k)));
    }
    Ok(TaskDataset {
        task_id,
        num_classes: p.k,
        pseudo_labels: p.assignments.clone(),
    })
}
