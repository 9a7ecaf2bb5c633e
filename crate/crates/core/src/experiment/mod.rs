//! End-to-end experiments: data → embedding → auxiliary tasks → training →
//! evaluation, with every artifact written to a fresh run directory.

mod config;
mod probe;
mod report;

pub use config::{DataConfig, DataSource, ExperimentConfig, ModelConfig, Regime, TasksConfig};
pub use probe::{ambiguity_probe, load_probe_dataset, read_pairs, ProbeRow};
pub use report::{compare, DeltaRow, RunReport};

use crate::data::{self, LabeledDataset, SplitSpec};
use crate::embedding::{self, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::nn::{ArchName, ArchSpec, ModelParams};
use crate::rng::derive;
use crate::taskgen::{self, Partition};
use crate::trainer::{self, EpisodeLog};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Seed streams derived from the experiment seed.
mod stream {
    pub const BLOBS: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SUBSAMPLE: u64 = 3;
    pub const AUTOENCODER: u64 = 4;
    pub const PARTITIONS: u64 = 5;
    pub const RANDOM_LABELS: u64 = 6;
    pub const INIT: u64 = 7;
    pub const TRAIN: u64 = 8;
    pub const NMI_BASELINE: u64 = 9;
}

/// Cap on examples used to report an auxiliary task's final loss.
const TASK_LOSS_SAMPLE: usize = 5000;

/// Train and test data before label subsampling.
pub struct LoadedData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<LoadedData> {
    match &cfg.data.source {
        DataSource::Mnist { dir } => Ok(LoadedData {
            train: data::load_mnist_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?,
            test: data::load_mnist_idx(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?,
        }),
        DataSource::Dset { train, test } => Ok(LoadedData {
            train: data::read_dset(train)?,
            test: data::read_dset(test)?,
        }),
        &DataSource::Blobs { k, per_cluster, d, spread, test_fraction } => {
            let (all, _) = data::synth_blobs(k, per_cluster, d, spread, derive(cfg.seed, stream::BLOBS))?;
            let spec = SplitSpec {
                fractions: vec![1.0 - test_fraction, test_fraction],
                seed: derive(cfg.seed, stream::SPLIT),
                stratified: true,
            };
            let mut parts = data::split(&all, &spec)?.into_iter();
            Ok(LoadedData {
                train: parts.next().expect("two parts"),
                test: parts.next().expect("two parts"),
            })
        }
    }
}

fn arch_for(cfg: &ExperimentConfig, input_shape: [usize; 3]) -> ArchSpec {
    match cfg.model.arch {
        ArchName::Mlp => ArchSpec::mlp(
            input_shape,
            if cfg.model.hidden.is_empty() { vec![64] } else { cfg.model.hidden.clone() },
            cfg.model.decoder_hidden.clone(),
        ),
        name => ArchSpec::named(name, Some(input_shape)),
    }
}

/// Everything a run produces before it is written to disk.
pub struct RunOutput {
    pub report: RunReport,
    pub model: ModelParams,
    pub logs: Vec<EpisodeLog>,
    pub partitions: Vec<Partition>,
    pub embedding: Option<EmbeddingMatrix>,
}

/// Runs the pipeline in memory. Errors name the stage that failed.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let seed = cfg.seed;
    let loaded = load_data(cfg).map_err(|e| e.in_stage("data"))?;
    let sub = data::subsample_labeled(&loaded.train, cfg.data.label_fraction, derive(seed, stream::SUBSAMPLE))
        .map_err(|e| e.in_stage("data"))?;
    let main = sub.labeled.clone();
    let class_count = main.class_count;

    // Examples that feed the embedding and carry the auxiliary labels, with
    // their true labels kept aside for cluster-quality diagnostics only.
    let (aux_source, aux_truth) = if cfg.data.use_unlabeled_for_embedding {
        let all = main.concat(&sub.unlabeled).map_err(|e| e.in_stage("data"))?;
        let truth_labels = loaded.train.labels()?;
        let truth: Vec<usize> = sub
            .labeled_indices
            .iter()
            .chain(&sub.unlabeled_indices)
            .map(|&i| truth_labels[i])
            .collect();
        (all.without_labels(), truth)
    } else {
        (main.without_labels(), main.labels()?.to_vec())
    };

    let mut ae_losses = Vec::new();
    let mut embedding = None;
    let mut partitions = Vec::new();
    let mut aux = Vec::new();
    if let Some(tasks) = cfg.tasks.as_ref().filter(|_| cfg.regime.uses_aux_tasks()) {
        let k = tasks.k.unwrap_or(class_count);
        partitions = if cfg.regime == Regime::MtlRandomLabels {
            (0..tasks.count as u64)
                .map(|t| taskgen::random_partition(aux_source.len(), k, derive(derive(seed, stream::RANDOM_LABELS), t)))
                .collect::<Result<_>>()
                .map_err(|e| e.in_stage("taskgen"))?
        } else {
            let z = match &tasks.embedding_file {
                Some(path) => {
                    let z = embedding::import_embeddings(path).map_err(|e| e.in_stage("embedding"))?;
                    if z.n != aux_source.len() {
                        return Err(Error::Data(format!(
                            "imported embedding has {} rows for {} examples",
                            z.n,
                            aux_source.len()
                        ))
                        .in_stage("embedding"));
                    }
                    z
                }
                None => {
                    let ae_cfg = embedding::AutoencoderConfig {
                        seed: derive(seed, stream::AUTOENCODER),
                        ..cfg.autoencoder.clone()
                    };
                    let trained = embedding::train_autoencoder(&aux_source, &ae_cfg).map_err(|e| e.in_stage("embedding"))?;
                    ae_losses = trained.epoch_losses;
                    embedding::embed(&aux_source, &trained.model).map_err(|e| e.in_stage("embedding"))?
                }
            };
            let p = taskgen::make_partitions(&z, tasks.count, k, tasks.transform, derive(seed, stream::PARTITIONS))
                .map_err(|e| e.in_stage("taskgen"))?;
            embedding = Some(z);
            p
        };
        for (t, p) in partitions.iter().enumerate() {
            let task = taskgen::partition_to_task(p, &aux_source, t + 1).map_err(|e| e.in_stage("taskgen"))?;
            aux.push(task.dataset(&aux_source).map_err(|e| e.in_stage("taskgen"))?);
        }
    }
    let partition_nmi = partitions
        .iter()
        .map(|p| taskgen::cluster_nmi(&p.assignments, &aux_truth))
        .collect::<Result<Vec<_>>>()?;
    let random_nmi = match partitions.first() {
        Some(p) => {
            let r = taskgen::random_partition(aux_truth.len(), p.k, derive(seed, stream::NMI_BASELINE))?;
            Some(taskgen::cluster_nmi(&r.assignments, &aux_truth)?)
        }
        None => None,
    };

    let arch = arch_for(cfg, main.shape);
    let counts: Vec<usize> = std::iter::once(class_count).chain(aux.iter().map(|d| d.class_count)).collect();
    let mut model = ModelParams::build(arch, &counts, derive(seed, stream::INIT)).map_err(|e| e.in_stage("model"))?;
    let train_cfg = trainer::TrainConfig {
        seed: derive(seed, stream::TRAIN),
        ..cfg.train.clone()
    };
    let logs = match cfg.regime {
        Regime::Stl => trainer::train_stl(&mut model, &main, None, &train_cfg),
        Regime::MtlJoint | Regime::MtlRandomLabels => trainer::train_mtl_joint(&mut model, &main, &aux, None, &train_cfg),
        Regime::MetaMtl => trainer::train_meta_mtl(&mut model, &main, &aux, None, &train_cfg),
    }
    .map_err(|e| e.in_stage("train"))?;

    let eval = |e: Error| e.in_stage("evaluate");
    let mut accuracy = BTreeMap::new();
    accuracy.insert("train".to_string(), trainer::evaluate(&model, &main, 0).map_err(eval)?);
    accuracy.insert("test".to_string(), trainer::evaluate(&model, &loaded.test, 0).map_err(eval)?);
    let mut task_losses = vec![trainer::mean_loss(&model, &main, 0).map_err(eval)?];
    for (t, d) in aux.iter().enumerate() {
        let idx: Vec<usize> = (0..d.len().min(TASK_LOSS_SAMPLE)).collect();
        task_losses.push(trainer::mean_loss(&model, &d.subset(&idx)?, t + 1).map_err(eval)?);
    }

    let report = RunReport {
        regime: cfg.regime.as_str().to_string(),
        seed,
        dataset: format!(
            "{}:train={},test={},labeled={}",
            loaded.train.name,
            loaded.train.len(),
            loaded.test.len(),
            main.len()
        ),
        config: cfg.clone(),
        worker_threads: crate::parallel::worker_count(),
        thread_cap: crate::parallel::thread_cap_from_env(),
        accuracy,
        task_losses,
        partition_nmi,
        random_label_nmi: random_nmi,
        autoencoder_losses: ae_losses,
        episodes: logs.len(),
        warnings: sub.warnings,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        run_dir: None,
        checkpoint: None,
        metrics: None,
    };
    Ok(RunOutput {
        report,
        model,
        logs,
        partitions,
        embedding,
    })
}

/// First `run-<n>` directory under `root` that does not exist yet.
fn fresh_run_dir(root: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(root)?;
    for n in 1.. {
        let dir = root.join(format!("run-{n}"));
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    unreachable!("run directory numbering exhausted")
}

/// Runs the experiment and writes `config.toml`, `report.json`,
/// `metrics.csv`, `model.ckpt`, `partition-<t>.txt` and (when one was
/// computed) `embedding.emb1` into a new directory under `cfg.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunReport> {
    let out = execute(cfg)?;
    let write = |e: Error| e.in_stage("write");
    let dir = fresh_run_dir(&cfg.output_dir).map_err(write)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()).map_err(|e| write(e.into()))?;
    let metrics = dir.join("metrics.csv");
    std::fs::write(&metrics, trainer::logs_to_csv(&out.logs)).map_err(|e| write(e.into()))?;
    let checkpoint = dir.join("model.ckpt");
    out.model.save(&checkpoint).map_err(write)?;
    for (t, p) in out.partitions.iter().enumerate() {
        p.export(&dir.join(format!("partition-{}.txt", t + 1))).map_err(write)?;
    }
    if let Some(z) = &out.embedding {
        z.export(&dir.join("embedding.emb1")).map_err(write)?;
    }
    let mut report = out.report;
    report.run_dir = Some(dir.clone());
    report.checkpoint = Some(checkpoint);
    report.metrics = Some(metrics);
    report.save(&dir.join("report.json")).map_err(write)?;
    Ok(report)
}
