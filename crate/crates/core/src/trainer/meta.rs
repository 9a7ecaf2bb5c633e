use super::{check_tasks, draw, grads_finite, maybe_validate, EpisodeLog, TrainConfig};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{task_loss, ModelParams};
use crate::rng::{derive, rng};
use crate::tensor::{hvp, hvp_on_graph, norm_sq_all};
use crate::{Graph, HvpMode, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

/// Seed stream for task and batch draws in the meta regime.
const STREAM: u64 = 0x4d45_5441;

/// Batches used for one sampled task within an episode.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskBatch {
    pub task: usize,
    /// Examples of `task` for the inner step.
    pub inner: Vec<usize>,
    pub inner_seed: u64,
    /// Main-task examples for evaluating the candidate shared weights.
    pub main: Vec<usize>,
    pub main_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodePlan {
    pub batches: Vec<TaskBatch>,
}

/// Draws `tasks_per_episode` distinct tasks uniformly, then for each one an
/// inner batch and a fresh main-task batch. When the main task itself is
/// drawn, its two batches are disjoint halves of one draw.
pub fn plan_episode(task_sizes: &[usize], cfg: &TrainConfig, r: &mut crate::rng::Rng) -> Result<EpisodePlan> {
    let n_main = task_sizes[0];
    let k = cfg.batch_size;
    let tasks = sample(r, task_sizes.len(), cfg.tasks_per_episode).into_vec();
    let mut batches = Vec::with_capacity(tasks.len());
    for task in tasks {
        let (inner, inner_seed, main, main_seed);
        if task == 0 {
            if n_main < 2 {
                return Err(Error::Data("the main task needs two examples for disjoint batches".into()));
            }
            let mut both = draw(n_main, 2 * k, r);
            let half = k.min(both.len() / 2);
            main = both.split_off(half);
            inner = both;
            inner_seed = r.random();
            main_seed = r.random();
        } else {
            inner = draw(task_sizes[task], k, r);
            inner_seed = r.random();
            main = draw(n_main, k, r);
            main_seed = r.random();
        }
        batches.push(TaskBatch { task, inner, inner_seed, main, main_seed });
    }
    Ok(EpisodePlan { batches })
}

/// Everything one inner step plus main-task evaluation produces.
#[derive(Clone, Debug)]
pub struct MetaStep {
    /// Gradient of the main loss at the candidate shared weights with
    /// respect to the original shared weights.
    pub meta_grad: Vec<Tensor>,
    /// Inner-loss gradient for the task head.
    pub head_grad: Vec<Tensor>,
    /// Head after its inner step `head − α · head_grad`.
    pub updated_head: Vec<Tensor>,
    pub aux_loss: f64,
    pub meta_loss: f64,
}

fn values_or_zero(g: &Graph, grads: &[Option<Var>], like: &[Tensor]) -> Vec<Tensor> {
    grads
        .iter()
        .zip(like)
        .map(|(gv, p)| gv.map_or_else(|| Tensor::zeros(p.shape()), |v| g.value(v).clone()))
        .collect()
}

fn step(params: &[Tensor], grads: &[Tensor], lr: f64) -> Result<Vec<Tensor>> {
    params
        .iter()
        .zip(grads)
        .map(|(p, g)| {
            let mut q = p.clone();
            q.axpy(-lr, g)?;
            Ok(q)
        })
        .collect()
}

/// One inner step on `aux` followed by the main-task gradient through it.
///
/// `aux(g, shared, head)` is the inner task's loss; `main(g, shared,
/// updated_head)` is the main-task loss at the candidate shared weights
/// `θ* = shared − α ∇_shared aux`. With `order == 2` the result is
/// `(I − α ∇²aux) ∇main(θ*)`, the Hessian action coming from `mode`; with
/// `order == 1` it is `∇main(θ*)`.
pub fn meta_step<A, M>(
    aux: &A,
    main: &M,
    shared: &[Tensor],
    head: &[Tensor],
    alpha: f64,
    order: u8,
    mode: HvpMode,
) -> Result<MetaStep>
where
    A: Fn(&mut Graph, &[Var], &[Var]) -> Result<Var>,
    M: Fn(&mut Graph, &[Var], &[Tensor]) -> Result<Var>,
{
    let second_exact = order == 2 && mode == HvpMode::Exact;
    let mut g1 = Graph::new();
    let sv: Vec<Var> = shared.iter().map(|p| g1.param(p.clone())).collect();
    let hv: Vec<Var> = head.iter().map(|p| g1.param(p.clone())).collect();
    let l_aux = aux(&mut g1, &sv, &hv)?;
    let aux_loss = g1.value(l_aux).item()?;
    let all: Vec<Var> = sv.iter().chain(&hv).copied().collect();
    let first = g1.grad(l_aux, &all, second_exact)?;
    let (first_shared, first_head) = first.split_at(sv.len());
    let inner_shared = values_or_zero(&g1, first_shared, shared);
    let head_grad = values_or_zero(&g1, first_head, head);
    let theta_star = step(shared, &inner_shared, alpha)?;
    let updated_head = step(head, &head_grad, alpha)?;

    let mut g2 = Graph::new();
    let sv2: Vec<Var> = theta_star.iter().map(|p| g2.param(p.clone())).collect();
    let l0 = main(&mut g2, &sv2, &updated_head)?;
    let meta_loss = g2.value(l0).item()?;
    let d0 = g2.grad(l0, &sv2, false)?;
    let g0 = values_or_zero(&g2, &d0, shared);

    let meta_grad = if order == 1 {
        g0
    } else {
        let h_g0 = match mode {
            HvpMode::Exact => hvp_on_graph(&mut g1, &sv, first_shared, shared, &g0)?,
            HvpMode::FiniteDifference { .. } => {
                let aux_shared = |g: &mut Graph, s: &[Var]| {
                    let h: Vec<Var> = head.iter().map(|p| g.constant(p.clone())).collect();
                    aux(g, s, &h)
                };
                hvp(aux_shared, shared, &g0, mode)?
            }
        };
        step(&g0, &h_g0, alpha)?
    };
    Ok(MetaStep {
        meta_grad,
        head_grad,
        updated_head,
        aux_loss,
        meta_loss,
    })
}

/// Runs one episode: for each planned task, update its head with step
/// `alpha` and collect the meta gradient at the pre-episode shared weights;
/// then move the shared weights by `beta` times the mean meta gradient.
pub fn meta_episode(
    model: &mut ModelParams,
    tasks: &[&LabeledDataset],
    plan: &EpisodePlan,
    cfg: &TrainConfig,
    episode: usize,
) -> Result<EpisodeLog> {
    if plan.batches.is_empty() {
        return Err(Error::Parameter("episode plan samples no task".into()));
    }
    let shared = model.shared.clone();
    let main_data = tasks[0];
    let main_labels = main_data.labels()?;
    let mut total: Vec<Tensor> = shared.iter().map(|p| Tensor::zeros(p.shape())).collect();
    let mut aux_losses = Vec::with_capacity(plan.batches.len());
    let mut meta_losses = Vec::with_capacity(plan.batches.len());
    for b in &plan.batches {
        let data = tasks
            .get(b.task)
            .ok_or_else(|| Error::Index(format!("task {} of {}", b.task, tasks.len())))?;
        let labels = data.labels()?;
        let x_in = data.batch(&b.inner)?;
        let y_in: Vec<usize> = b.inner.iter().map(|&i| labels[i]).collect();
        let x_main = main_data.batch(&b.main)?;
        let y_main: Vec<usize> = b.main.iter().map(|&i| main_labels[i]).collect();
        let arch = &model.arch;
        let main_head = &model.decoders[0];
        let aux = |g: &mut Graph, s: &[Var], h: &[Var]| {
            task_loss(g, arch, s, h, &x_in, &y_in, true, b.inner_seed)
        };
        let main = |g: &mut Graph, s: &[Var], updated: &[Tensor]| {
            let head = if b.task == 0 { updated } else { main_head.as_slice() };
            let hv: Vec<Var> = head.iter().map(|p| g.constant(p.clone())).collect();
            task_loss(g, arch, s, &hv, &x_main, &y_main, true, b.main_seed)
        };
        let out = meta_step(&aux, &main, &shared, &model.decoders[b.task], cfg.alpha, cfg.meta_order, cfg.hvp)?;
        for (name, v) in [("inner loss", out.aux_loss), ("meta loss", out.meta_loss)] {
            super::finite_or_diverged(v, episode, name)?;
        }
        grads_finite(&out.meta_grad, episode, "meta gradient")?;
        grads_finite(&out.updated_head, episode, "decoder update")?;
        model.decoders[b.task] = out.updated_head;
        for (acc, g) in total.iter_mut().zip(&out.meta_grad) {
            acc.axpy(1.0, g)?;
        }
        aux_losses.push(out.aux_loss);
        meta_losses.push(out.meta_loss);
    }
    let count = plan.batches.len() as f64;
    let mean: Vec<Tensor> = total.iter().map(|t| t.map(|x| x / count)).collect();
    crate::optim::sgd_step(&mut model.shared, &mean, cfg.beta)?;
    Ok(EpisodeLog {
        episode,
        task_ids: plan.batches.iter().map(|b| b.task).collect(),
        task_losses: aux_losses,
        meta_loss: meta_losses.iter().sum::<f64>() / count,
        grad_norm_f: norm_sq_all(&mean).sqrt(),
        val_acc: None,
        main_batches: plan.batches.iter().map(|b| b.main.clone()).collect(),
    })
}

/// `episodes` meta episodes over the main task (task 0) and `aux`.
pub fn train_meta_mtl(
    model: &mut ModelParams,
    main: &LabeledDataset,
    aux: &[LabeledDataset],
    validation: Option<&LabeledDataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpisodeLog>> {
    let tasks: Vec<&LabeledDataset> = std::iter::once(main).chain(aux).collect();
    cfg.validate(Some(tasks.len()))?;
    check_tasks(model, &tasks)?;
    let sizes: Vec<usize> = tasks.iter().map(|d| d.len()).collect();
    let mut r = rng(derive(cfg.seed, STREAM));
    let mut logs = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let plan = plan_episode(&sizes, cfg, &mut r)?;
        let mut log = meta_episode(model, &tasks, &plan, cfg, e)?;
        log.val_acc = maybe_validate(model, validation, cfg, e)?;
        logs.push(log);
    }
    Ok(logs)
}
