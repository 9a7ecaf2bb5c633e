use crate::embedding::AutoencoderConfig;
use crate::error::{Error, Result};
use crate::nn::ArchName;
use crate::taskgen::TransformKind;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Main task only.
    Stl,
    /// Joint SGD on the main task and k-means tasks.
    MtlJoint,
    /// Joint SGD on the main task and uniformly random labellings.
    MtlRandomLabels,
    /// Meta-updated shared encoder over the main task and k-means tasks.
    MetaMtl,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Stl => "stl",
            Regime::MtlJoint => "mtl_joint",
            Regime::MtlRandomLabels => "mtl_random_labels",
            Regime::MetaMtl => "meta_mtl",
        }
    }

    pub fn uses_aux_tasks(self) -> bool {
        self != Regime::Stl
    }
}

/// Where the train and test examples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Directory holding the four standard IDX files.
    Mnist { dir: PathBuf },
    /// Two `DSET` files.
    Dset { train: PathBuf, test: PathBuf },
    /// Gaussian blobs, split into train and test.
    Blobs {
        k: usize,
        per_cluster: usize,
        d: usize,
        spread: f64,
        test_fraction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Share of each training class that keeps its labels.
    #[serde(default = "one")]
    pub label_fraction: f64,
    /// Train the embedding (and define auxiliary tasks) on the labelled and
    /// unlabelled training examples instead of the labelled ones only.
    #[serde(default)]
    pub use_unlabeled_for_embedding: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchName,
    /// Encoder widths for the `mlp` architecture.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Decoder hidden widths for the `mlp` architecture.
    #[serde(default)]
    pub decoder_hidden: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TasksConfig {
    /// Number of auxiliary tasks.
    pub count: usize,
    /// Clusters per task; defaults to the main task's class count.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "default_transform")]
    pub transform: TransformKind,
    /// Use this `EMB1` file instead of training an autoencoder.
    #[serde(default)]
    pub embedding_file: Option<PathBuf>,
}

fn default_transform() -> TransformKind {
    TransformKind::RandomScaling
}

/// A complete experiment description.
///
/// `seed` drives every random choice: label subsampling, the autoencoder,
/// the partitions, initialization and batch draws. Seeds inside the
/// `autoencoder` and `train` sections are replaced by values derived from it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub regime: Regime,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub tasks: Option<TasksConfig>,
    #[serde(default)]
    pub autoencoder: AutoencoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file. Relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data.source {
            DataSource::Mnist { dir } => fix(dir),
            DataSource::Dset { train, test } => {
                fix(train);
                fix(test);
            }
            DataSource::Blobs { .. } => {}
        }
        if let Some(f) = self.tasks.as_mut().and_then(|t| t.embedding_file.as_mut()) {
            fix(f);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.data.label_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("data.label_fraction = {f} is not in (0, 1]")));
        }
        if let DataSource::Blobs { test_fraction, .. } = self.data.source {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return Err(Error::Config(format!("blobs test_fraction = {test_fraction}")));
            }
        }
        if self.regime.uses_aux_tasks() {
            match &self.tasks {
                None => {
                    return Err(Error::Config(format!(
                        "regime `{}` needs a [tasks] section",
                        self.regime.as_str()
                    )))
                }
                Some(t) if t.count == 0 => {
                    return Err(Error::Config("tasks.count must be at least 1".into()))
                }
                Some(t) if t.k.is_some_and(|k| k < 2) => {
                    return Err(Error::Config("tasks.k must be at least 2".into()))
                }
                _ => {}
            }
        }
        self.autoencoder.validate().map_err(|e| Error::Config(e.to_string()))?;
        let task_count = match self.regime {
            Regime::MetaMtl => self.tasks.as_ref().map(|t| t.count + 1),
            _ => None,
        };
        self.train.validate(task_count).map_err(|e| Error::Config(e.to_string()))
    }
}
