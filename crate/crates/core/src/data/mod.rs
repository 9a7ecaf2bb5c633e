//! Datasets: in-memory representation, file formats, label subsampling,
//! deterministic splits and synthetic clusters.

mod dset;
mod idx;
mod synth;

pub use dset::{read_dset, write_dset};
pub use idx::{load_mnist_idx, parse_idx_images, parse_idx_labels};
pub use synth::synth_blobs;

use crate::error::{Error, Result};
use crate::Tensor;
use rand::seq::SliceRandom;

/// Examples of shape `[C, H, W]` with values in `[0, 1]`, optionally labelled.
///
/// Inputs are stored flat, example after example. Unlabelled data carries
/// `labels: None` rather than placeholder values.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub shape: [usize; 3],
    pub inputs: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        shape: [usize; 3],
        inputs: Vec<f64>,
        labels: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if per == 0 {
            return Err(Error::Shape(format!("example shape {shape:?} has a zero extent")));
        }
        if !inputs.len().is_multiple_of(per) {
            return Err(Error::Data(format!(
                "{} input values do not divide into examples of {per}",
                inputs.len()
            )));
        }
        let n = inputs.len() / per;
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Data(format!("{} labels for {n} examples", l.len())));
            }
            if let Some(&bad) = l.iter().find(|&&y| y >= class_count) {
                return Err(Error::Index(format!("label {bad} with {class_count} classes")));
            }
        }
        Ok(LabeledDataset {
            name: name.into(),
            shape,
            inputs,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.example_len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Number of scalar values per example, `C·H·W`.
    pub fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn example(&self, i: usize) -> &[f64] {
        let m = self.example_len();
        &self.inputs[i * m..(i + 1) * m]
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Data(format!("dataset `{}` has no labels", self.name)))
    }

    /// Stacks the selected examples into a `[b, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let m = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("example {i} of {}", self.len())));
            }
            data.extend_from_slice(self.example(i));
        }
        let [c, h, w] = self.shape;
        Tensor::new(vec![indices.len(), c, h, w], data)
    }

    /// Copies the selected examples (and their labels) into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let m = self.example_len();
        let mut inputs = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Index(format!("example {i} of {}", self.len())));
            }
            inputs.extend_from_slice(self.example(i));
        }
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(LabeledDataset {
            name: self.name.clone(),
            shape: self.shape,
            inputs,
            labels,
            class_count: self.class_count,
        })
    }

    /// Same inputs with the label column removed.
    pub fn without_labels(&self) -> LabeledDataset {
        LabeledDataset {
            labels: None,
            ..self.clone()
        }
    }

    /// Same inputs with `labels` in place of the current ones.
    pub fn with_labels(&self, labels: Vec<usize>, class_count: usize) -> Result<LabeledDataset> {
        LabeledDataset::new(
            self.name.clone(),
            self.shape,
            self.inputs.clone(),
            Some(labels),
            class_count,
        )
    }

    /// Concatenates two datasets of the same example shape. Labels are kept
    /// only when both sides have them.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} and {:?} examples",
                self.shape, other.shape
            )));
        }
        let mut inputs = self.inputs.clone();
        inputs.extend_from_slice(&other.inputs);
        let labels = match (&self.labels, &other.labels) {
            (Some(a), Some(b)) => Some(a.iter().chain(b).copied().collect()),
            _ => None,
        };
        LabeledDataset::new(
            self.name.clone(),
            self.shape,
            inputs,
            labels,
            self.class_count.max(other.class_count),
        )
    }

    /// Example indices grouped by label.
    fn by_class(&self) -> Result<Vec<Vec<usize>>> {
        let labels = self.labels()?;
        let mut groups = vec![Vec::new(); self.class_count];
        for (i, &y) in labels.iter().enumerate() {
            groups[y].push(i);
        }
        Ok(groups)
    }
}

/// Result of [`subsample_labeled`].
#[derive(Clone, Debug)]
pub struct Subsample {
    pub labeled: LabeledDataset,
    /// Every example not selected, with labels stripped.
    pub unlabeled: LabeledDataset,
    pub labeled_indices: Vec<usize>,
    pub unlabeled_indices: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Keeps `⌈fraction · n_c⌉` randomly chosen examples of each class `c` as the
/// labelled set. Both outputs list examples in their original order.
pub fn subsample_labeled(data: &LabeledDataset, fraction: f64, seed: u64) -> Result<Subsample> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("label fraction {fraction} not in (0, 1]")));
    }
    let mut rng = crate::rng::rng(seed);
    let mut keep = vec![false; data.len()];
    let mut warnings = Vec::new();
    for (c, mut members) in data.by_class()?.into_iter().enumerate() {
        if members.is_empty() {
            warnings.push(format!("class {c} has no examples and is absent from the labelled subset"));
            continue;
        }
        members.shuffle(&mut rng);
        let take = ((fraction * members.len() as f64).ceil() as usize).min(members.len());
        for &i in &members[..take] {
            keep[i] = true;
        }
    }
    let (labeled_indices, unlabeled_indices): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| keep[i]);
    Ok(Subsample {
        labeled: data.subset(&labeled_indices)?,
        unlabeled: data.subset(&unlabeled_indices)?.without_labels(),
        labeled_indices,
        unlabeled_indices,
        warnings,
    })
}

/// How to cut a dataset into disjoint parts.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub fractions: Vec<f64>,
    pub seed: u64,
    /// Apply the fractions within each class rather than to the whole set.
    pub stratified: bool,
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        if self.fractions.is_empty() {
            return Err(Error::Parameter("split needs at least one fraction".into()));
        }
        if let Some(f) = self.fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
            return Err(Error::Parameter(format!("split fraction {f} not in (0, 1]")));
        }
        let total: f64 = self.fractions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split fractions sum to {total}")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items to `fractions`.
fn apportion(n: usize, fractions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut left = n.saturating_sub(counts.iter().sum());
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Index sets of each part, each in ascending order.
pub fn split_indices(data: &LabeledDataset, spec: &SplitSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let groups = if spec.stratified {
        data.by_class()?
    } else {
        vec![(0..data.len()).collect()]
    };
    let mut rng = crate::rng::rng(spec.seed);
    let mut parts = vec![Vec::new(); spec.fractions.len()];
    for mut members in groups {
        members.shuffle(&mut rng);
        let mut rest = members.as_slice();
        for (part, count) in parts.iter_mut().zip(apportion(members.len(), &spec.fractions)) {
            let (head, tail) = rest.split_at(count);
            part.extend_from_slice(head);
            rest = tail;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    Ok(parts)
}

/// Disjoint, exhaustive parts of `data` sized by `spec.fractions`.
pub fn split(data: &LabeledDataset, spec: &SplitSpec) -> Result<Vec<LabeledDataset>> {
    split_indices(data, spec)?
        .iter()
        .map(|idx| data.subset(idx))
        .collect()
}
