use super::ExperimentConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Summary of one run, written as `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub regime: String,
    pub seed: u64,
    /// Dataset name and sizes; runs are only comparable when this matches.
    pub dataset: String,
    pub config: ExperimentConfig,
    pub worker_threads: usize,
    /// Value of `MMTL_THREADS`, if set.
    pub thread_cap: Option<usize>,
    /// Main-task accuracy per split.
    pub accuracy: BTreeMap<String, f64>,
    /// Final mean loss of each head on its own task (head 0 first).
    pub task_losses: Vec<f64>,
    /// NMI between each auxiliary labelling and the true labels.
    pub partition_nmi: Vec<f64>,
    /// NMI of one uniformly random labelling, as a reference level.
    pub random_label_nmi: Option<f64>,
    pub autoencoder_losses: Vec<f64>,
    pub episodes: usize,
    pub warnings: Vec<String>,
    pub wall_clock_secs: f64,
    pub run_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    /// Named scalar metrics, in a stable order.
    fn metrics(&self) -> Vec<(String, f64)> {
        let mut m: Vec<(String, f64)> = self
            .accuracy
            .iter()
            .map(|(k, v)| (format!("accuracy.{k}"), *v))
            .collect();
        if let Some(l) = self.task_losses.first() {
            m.push(("main_loss".into(), *l));
        }
        if !self.partition_nmi.is_empty() {
            let mean = self.partition_nmi.iter().sum::<f64>() / self.partition_nmi.len() as f64;
            m.push(("partition_nmi_mean".into(), mean));
        }
        m
    }
}

/// One row of a report comparison: `delta = b − a`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaRow {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
}

/// Metric-by-metric differences between two runs on the same data and seed.
pub fn compare(a: &RunReport, b: &RunReport) -> Result<Vec<DeltaRow>> {
    if a.dataset != b.dataset {
        return Err(Error::Comparison(format!(
            "datasets differ: `{}` vs `{}`",
            a.dataset, b.dataset
        )));
    }
    if a.seed != b.seed {
        return Err(Error::Comparison(format!("seeds differ: {} vs {}", a.seed, b.seed)));
    }
    let ma: BTreeMap<String, f64> = a.metrics().into_iter().collect();
    let mb: BTreeMap<String, f64> = b.metrics().into_iter().collect();
    let mut names: Vec<&String> = ma.keys().chain(mb.keys()).collect();
    names.sort();
    names.dedup();
    Ok(names
        .into_iter()
        .map(|n| {
            let (x, y) = (ma.get(n).copied(), mb.get(n).copied());
            DeltaRow {
                metric: n.clone(),
                a: x,
                b: y,
                delta: x.zip(y).map(|(x, y)| y - x),
            }
        })
        .collect())
}
