//! Training regimes sharing one encoder: single-task, joint multi-task, and
//! meta-updated multi-task learning; plus evaluation.

mod meta;
mod supervised;

pub use meta::{meta_episode, meta_step, plan_episode, train_meta_mtl, EpisodePlan, MetaStep, TaskBatch};
pub use supervised::{train_mtl_joint, train_stl};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::{parallel, HvpMode, Tensor};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Step size of the per-task inner update (decoders and candidate
    /// shared weights).
    pub alpha: f64,
    /// Step size of the shared-encoder meta update, and of plain SGD in the
    /// single-task and joint regimes.
    pub beta: f64,
    /// Episodes (meta regime) or SGD steps (other regimes).
    pub episodes: usize,
    pub batch_size: usize,
    pub tasks_per_episode: usize,
    /// 2 keeps the Hessian term of the meta gradient; 1 drops it.
    pub meta_order: u8,
    pub hvp: HvpMode,
    pub seed: u64,
    /// Evaluate on the validation set every this many episodes; 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.01,
            beta: 0.01,
            episodes: 1000,
            batch_size: 32,
            tasks_per_episode: 4,
            meta_order: 2,
            hvp: HvpMode::default(),
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Checks ranges. `alpha` and `beta` may be zero, which is how the
    /// reduction identities are exercised; negative or non-finite rates are
    /// rejected. `task_count` bounds the tasks sampled per episode and is
    /// only relevant to the meta regime.
    pub fn validate(&self, task_count: Option<usize>) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} = {v}")));
            }
        }
        if self.episodes == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("episodes and batch size must be positive".into()));
        }
        if let Some(n) = task_count {
            if self.tasks_per_episode == 0 || self.tasks_per_episode > n {
                return Err(Error::Parameter(format!(
                    "tasks per episode {} with {n} tasks",
                    self.tasks_per_episode
                )));
            }
        }
        if !matches!(self.meta_order, 1 | 2) {
            return Err(Error::Parameter(format!("meta order {}", self.meta_order)));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub task_ids: Vec<usize>,
    /// Loss of each sampled task at the start of the episode (aux tasks
    /// only in the joint regime; empty for single-task training).
    pub task_losses: Vec<f64>,
    /// Main-task loss driving the shared update.
    pub meta_loss: f64,
    /// Norm of the shared-encoder update direction.
    pub grad_norm_f: f64,
    pub val_acc: Option<f64>,
    /// Main-task examples used for the shared update, one list per sampled
    /// task (a single list outside the meta regime).
    pub main_batches: Vec<Vec<usize>>,
}

impl EpisodeLog {
    pub fn aux_loss_mean(&self) -> Option<f64> {
        (!self.task_losses.is_empty())
            .then(|| self.task_losses.iter().sum::<f64>() / self.task_losses.len() as f64)
    }
}

pub const LOG_HEADER: &str = "episode,task_ids,aux_loss_mean,meta_loss,grad_norm_F,val_acc";

/// CSV rendering of a log with six decimals; task ids are `;`-separated and
/// absent values are empty cells.
pub fn logs_to_csv(logs: &[EpisodeLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for l in logs {
        let ids: Vec<String> = l.task_ids.iter().map(usize::to_string).collect();
        writeln!(
            s,
            "{},{},{},{:.6},{:.6},{}",
            l.episode,
            ids.join(";"),
            opt(l.aux_loss_mean()),
            l.meta_loss,
            l.grad_norm_f,
            opt(l.val_acc)
        )
        .expect("writing to a String");
    }
    s
}

/// Examples per evaluation batch.
const EVAL_CHUNK: usize = 250;

/// Argmax predictions of head `t` in eval mode.
pub fn predict(model: &ModelParams, data: &LabeledDataset, t: usize) -> Result<Vec<usize>> {
    let parts = parallel::map_chunks(data.len(), EVAL_CHUNK, |range| -> Result<Vec<usize>> {
        let idx: Vec<usize> = range.collect();
        let logits = model.forward(t, &data.batch(&idx)?, false, 0)?;
        let l = logits.shape()[1];
        Ok(logits
            .data()
            .chunks(l)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                    .0
            })
            .collect())
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of examples whose argmax logit under head `t` equals the label.
pub fn evaluate(model: &ModelParams, data: &LabeledDataset, t: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("evaluation on an empty dataset".into()));
    }
    let labels = data.labels()?;
    let pred = predict(model, data, t)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Mean eval-mode cross-entropy of head `t` over the whole dataset.
pub fn mean_loss(model: &ModelParams, data: &LabeledDataset, t: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("loss of an empty dataset".into()));
    }
    let labels = data.labels()?;
    let parts = parallel::map_chunks(data.len(), EVAL_CHUNK, |range| -> Result<f64> {
        let idx: Vec<usize> = range.collect();
        let logits = model.forward(t, &data.batch(&idx)?, false, 0)?;
        let l = logits.shape()[1];
        let lsm = crate::tensor::kernels::log_softmax_rows(logits.data(), l);
        Ok(idx.iter().enumerate().map(|(r, &i)| -lsm[r * l + labels[i]]).sum())
    });
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / data.len() as f64)
}

/// `min(k, n)` distinct indices below `n`, in draw order.
pub(crate) fn draw(n: usize, k: usize, rng: &mut crate::rng::Rng) -> Vec<usize> {
    sample(rng, n, k.min(n)).into_vec()
}

fn check_tasks(model: &ModelParams, tasks: &[&LabeledDataset]) -> Result<()> {
    if tasks.len() != model.num_tasks() {
        return Err(Error::Contract(format!(
            "{} datasets for a model with {} heads",
            tasks.len(),
            model.num_tasks()
        )));
    }
    for (t, d) in tasks.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::Data(format!("task {t} has no examples")));
        }
        d.labels()?;
        if d.shape != model.arch.input_shape {
            return Err(Error::Shape(format!(
                "task {t} examples are {:?}, model expects {:?}",
                d.shape, model.arch.input_shape
            )));
        }
        if d.class_count > model.class_counts[t] {
            return Err(Error::Contract(format!(
                "task {t} has {} classes, head {t} outputs {}",
                d.class_count, model.class_counts[t]
            )));
        }
    }
    Ok(())
}

fn finite_or_diverged(value: f64, episode: usize, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Divergence {
            episode,
            msg: format!("{what} is {value}"),
        })
    }
}

fn grads_finite(grads: &[Tensor], episode: usize, what: &str) -> Result<()> {
    if grads.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(Error::Divergence {
            episode,
            msg: format!("{what} has non-finite entries"),
        })
    }
}

/// Validation accuracy when `episode` (0-based) ends an evaluation period.
fn maybe_validate(
    model: &ModelParams,
    validation: Option<&LabeledDataset>,
    cfg: &TrainConfig,
    episode: usize,
) -> Result<Option<f64>> {
    match validation {
        Some(v) if cfg.eval_every > 0 && ((episode + 1).is_multiple_of(cfg.eval_every) || episode + 1 == cfg.episodes) => {
            evaluate(model, v, 0).map(Some)
        }
        _ => Ok(None),
    }
}
