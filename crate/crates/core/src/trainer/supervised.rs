use super::{check_tasks, draw, finite_or_diverged, grads_finite, maybe_validate, EpisodeLog, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{task_loss, ModelParams};
use crate::optim::sgd_step;
use crate::rng::{derive, rng};
use crate::{Graph, Tensor, Var};
use rand::Rng;

/// Seed stream for batch draws in the SGD regimes.
const STREAM: u64 = 0x5347_4400;

/// Minibatch SGD on the sum of every task's loss. Each step draws one batch
/// per task, in task order, followed by that batch's dropout seed.
fn train_supervised(
    model: &mut ModelParams,
    tasks: &[&LabeledDataset],
    validation: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpisodeLog>> {
    cfg.validate(None)?;
    check_tasks(model, tasks)?;
    let mut r = rng(derive(cfg.seed, STREAM));
    let mut logs = Vec::with_capacity(cfg.episodes);
    let n_shared = model.shared.len();
    for step in 0..cfg.episodes {
        let mut g = Graph::new();
        let shared: Vec<Var> = model.shared.iter().map(|p| g.param(p.clone())).collect();
        let heads: Vec<Vec<Var>> = model
            .decoders
            .iter()
            .map(|d| d.iter().map(|p| g.param(p.clone())).collect())
            .collect();
        let mut total: Option<Var> = None;
        let mut losses = Vec::with_capacity(tasks.len());
        let mut main_batch = Vec::new();
        for (t, data) in tasks.iter().enumerate() {
            let idx = draw(data.len(), cfg.batch_size, &mut r);
            let dropout_seed: u64 = r.random();
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels().expect("checked")[i]).collect();
            let x = data.batch(&idx)?;
            let l = task_loss(&mut g, &model.arch, &shared, &heads[t], &x, &labels, true, dropout_seed)?;
            losses.push(finite_or_diverged(g.value(l).item()?, step, "training loss")?);
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
            if t == 0 {
                main_batch = idx;
            }
        }
        let total = total.expect("at least the main task");
        let vars: Vec<Var> = shared.iter().chain(heads.iter().flatten()).copied().collect();
        let grads: Vec<Tensor> = g
            .grad(total, &vars, false)?
            .into_iter()
            .zip(&vars)
            .map(|(gv, &v)| gv.map_or_else(|| Tensor::zeros(g.shape(v)), |gv| g.value(gv).clone()))
            .collect();
        grads_finite(&grads, step, "gradient")?;
        let grad_norm_f = crate::tensor::norm_sq_all(&grads[..n_shared]).sqrt();
        let mut rest = &grads[n_shared..];
        sgd_step(&mut model.shared, &grads[..n_shared], cfg.beta)?;
        for head in &mut model.decoders {
            let (mine, tail) = rest.split_at(head.len());
            sgd_step(head, mine, cfg.beta)?;
            rest = tail;
        }
        logs.push(EpisodeLog {
            episode: step,
            task_ids: (0..tasks.len()).collect(),
            task_losses: losses[1..].to_vec(),
            meta_loss: losses[0],
            grad_norm_f,
            val_acc: maybe_validate(model, validation, cfg, step)?,
            main_batches: vec![main_batch],
        });
    }
    Ok(logs)
}

/// Single-task SGD with step size `beta` for `episodes` steps.
pub fn train_stl(
    model: &mut ModelParams,
    main: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpisodeLog>> {
    if model.num_tasks() != 1 {
        return Err(Error::Contract(format!(
            "single-task training needs one head, model has {}",
            model.num_tasks()
        )));
    }
    train_supervised(model, &[main], validation, cfg)
}

/// Joint SGD on the unweighted sum of the main loss and every auxiliary loss.
pub fn train_mtl_joint(
    model: &mut ModelParams,
    main: &LabeledDataset,
    aux: &[LabeledDataset],
    validation: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpisodeLog>> {
    let tasks: Vec<&LabeledDataset> = std::iter::once(main).chain(aux).collect();
    train_supervised(model, &tasks, validation, cfg)
}
