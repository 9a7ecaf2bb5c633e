//! Acceptance gate: one PASS/FAIL line per criterion. Criteria 1 and 6 run
//! the full MNIST experiment and need the IDX files under `data/mnist`.

mod common;

use metamtl::data::synth_blobs;
use metamtl::embedding::{EmbeddingMatrix, EmbeddingSource};
use metamtl::experiment::{self, ExperimentConfig, RunReport};
use metamtl::nn::{task_loss, ArchSpec, ModelParams};
use metamtl::optim::sgd_step;
use metamtl::taskgen::{cluster_nmi, kmeans, random_partition, KMEANS_MAX_ITER, KMEANS_TOL};
use metamtl::tensor::{gradient, hvp};
use metamtl::trainer::{meta_step, train_meta_mtl, train_mtl_joint, train_stl, TrainConfig};
use metamtl::{Graph, HvpMode, Result, Tensor, Var};
use std::path::PathBuf;
use std::time::Instant;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn consts(g: &mut Graph, ts: &[Tensor]) -> Vec<Var> {
    ts.iter().map(|t| g.constant(t.clone())).collect()
}

fn half_sq(g: &mut Graph, theta: Var, c: f64) -> Result<Var> {
    let cv = g.constant(Tensor::vector(vec![c]));
    let d = g.sub(theta, cv)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq);
    Ok(g.scale(s, 0.5))
}

fn meta_gradient() -> Outcome {
    let mut worst_quad = 0.0f64;
    for &(theta, a, b) in &[(0.3, -1.0, 2.0), (5.0, 4.5, -3.25), (-2.0, 0.7, 0.1)] {
        for alpha in [0.01, 0.1, 0.5] {
            let aux = |g: &mut Graph, s: &[Var], _: &[Var]| half_sq(g, s[0], a);
            let main = |g: &mut Graph, s: &[Var], _: &[Tensor]| half_sq(g, s[0], b);
            let out = meta_step(&aux, &main, &[Tensor::vector(vec![theta])], &[], alpha, 2, HvpMode::Exact)
                .map_err(|e| e.to_string())?;
            let want = (1.0 - alpha) * (theta - alpha * (theta - a) - b);
            worst_quad = worst_quad.max((out.meta_grad[0].data()[0] - want).abs());
        }
    }

    let arch = ArchSpec::mlp([1, 1, 3], vec![5], vec![]);
    let model = ModelParams::build(arch.clone(), &[2, 3], 4).map_err(|e| e.to_string())?;
    let mut r = metamtl::rng::rng(8);
    let x_aux = Tensor::uniform(&[6, 1, 1, 3], -1.0, 1.0, &mut r);
    let y_aux = [0, 1, 2, 2, 1, 0];
    let x_main = Tensor::uniform(&[5, 1, 1, 3], -1.0, 1.0, &mut r);
    let y_main = [1, 0, 0, 1, 1];
    let mut shared = model.shared.clone();
    shared[1] = Tensor::uniform(&[5], 0.2, 0.6, &mut r);
    let head = model.decoders[1].clone();
    let main_head = model.decoders[0].clone();
    let alpha = 0.3;
    let aux = |g: &mut Graph, s: &[Var], h: &[Var]| task_loss(g, &arch, s, h, &x_aux, &y_aux, true, 0);
    let main = |g: &mut Graph, s: &[Var], _: &[Tensor]| {
        let h = consts(g, &main_head);
        task_loss(g, &arch, s, &h, &x_main, &y_main, true, 0)
    };
    let out = meta_step(&aux, &main, &shared, &head, alpha, 2, HvpMode::Exact).map_err(|e| e.to_string())?;
    let outer = |theta: &[Tensor]| -> f64 {
        let aux_theta = |g: &mut Graph, s: &[Var]| {
            let h = consts(g, &head);
            task_loss(g, &arch, s, &h, &x_aux, &y_aux, true, 0)
        };
        let (_, grad) = gradient(&aux_theta, theta).unwrap();
        let star: Vec<Tensor> = theta
            .iter()
            .zip(&grad)
            .map(|(p, d)| {
                let mut q = p.clone();
                q.axpy(-alpha, d).unwrap();
                q
            })
            .collect();
        common::eval(&|g: &mut Graph, s: &[Var]| main(g, s, &[]), &star)
    };
    let eps = 1e-5;
    let mut numeric = Vec::new();
    for i in 0..shared.len() {
        let mut gi = vec![0.0; shared[i].numel()];
        for (j, gij) in gi.iter_mut().enumerate() {
            let mut p = shared.clone();
            let x0 = p[i].data()[j];
            p[i].data_mut()[j] = x0 + eps;
            let up = outer(&p);
            p[i].data_mut()[j] = x0 - eps;
            *gij = (up - outer(&p)) / (2.0 * eps);
        }
        numeric.push(Tensor::new(shared[i].shape().to_vec(), gi).unwrap());
    }
    let rel = common::max_rel_err(&out.meta_grad, &numeric, 1e-6);
    check(
        rel < 1e-3 && worst_quad < 1e-10,
        format!(
            "tiny MLP ({} params) max rel err {rel:.2e} (< 1e-3); quadratic max abs err {worst_quad:.2e} (< 1e-10)",
            model.param_count()
        ),
    )
}

fn blobs_tasks() -> (metamtl::data::LabeledDataset, Vec<metamtl::data::LabeledDataset>) {
    let main = synth_blobs(3, 20, 4, 1.0, 1).unwrap().0;
    let aux = (0..2)
        .map(|t| {
            let p = random_partition(main.len(), 3, 10 + t).unwrap();
            main.with_labels(p.assignments, 3).unwrap()
        })
        .collect();
    (main, aux)
}

fn small_cfg(episodes: usize) -> TrainConfig {
    TrainConfig {
        alpha: 0.05,
        beta: 0.1,
        episodes,
        batch_size: 8,
        tasks_per_episode: 2,
        meta_order: 2,
        hvp: HvpMode::Exact,
        seed: 5,
        eval_every: 0,
    }
}

fn reductions() -> Outcome {
    let (main, aux) = blobs_tasks();
    let arch = ArchSpec::mlp(main.shape, vec![8], vec![6]);
    let base = ModelParams::build(arch, &[3, 3, 3], 0).unwrap();
    let cfg = TrainConfig { alpha: 0.0, ..small_cfg(8) };
    let mut replay = base.shared.clone();
    let mut alpha_ok = true;
    for m in 1..=cfg.episodes {
        let mut model = base.clone();
        let logs = train_meta_mtl(&mut model, &main, &aux, None, &TrainConfig { episodes: m, ..cfg.clone() })
            .map_err(|e| e.to_string())?;
        let log = &logs[m - 1];
        let mut total: Vec<Tensor> = replay.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for batch in &log.main_batches {
            let x = main.batch(batch).unwrap();
            let y: Vec<usize> = batch.iter().map(|&i| main.labels().unwrap()[i]).collect();
            let loss = |g: &mut Graph, s: &[Var]| {
                let h = consts(g, &base.decoders[0]);
                task_loss(g, &base.arch, s, &h, &x, &y, true, 0)
            };
            let (_, grad) = gradient(&loss, &replay).unwrap();
            for (acc, d) in total.iter_mut().zip(&grad) {
                acc.axpy(1.0, d).unwrap();
            }
        }
        let n = log.main_batches.len() as f64;
        let mean: Vec<Tensor> = total.iter().map(|t| t.map(|v| v / n)).collect();
        sgd_step(&mut replay, &mean, cfg.beta).unwrap();
        let same_bits = model
            .shared
            .iter()
            .zip(&replay)
            .all(|(a, b)| a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        alpha_ok &= same_bits;
    }

    let mut frozen = base.clone();
    train_meta_mtl(&mut frozen, &main, &aux, None, &TrainConfig { beta: 0.0, ..small_cfg(8) }).map_err(|e| e.to_string())?;
    let beta_ok = frozen.shared == base.shared && frozen.decoders != base.decoders;

    let single = ModelParams::build(ArchSpec::mlp(main.shape, vec![8], vec![6]), &[3], 0).unwrap();
    let (mut a, mut b) = (single.clone(), single);
    let la = train_stl(&mut a, &main, None, &small_cfg(30)).map_err(|e| e.to_string())?;
    let lb = train_mtl_joint(&mut b, &main, &[], None, &small_cfg(30)).map_err(|e| e.to_string())?;
    let joint_ok = la == lb && a.to_bytes() == b.to_bytes();
    check(
        alpha_ok && beta_ok && joint_ok,
        format!("alpha=0 bit-equal to SGD replay: {alpha_ok}; beta=0 freezes shared: {beta_ok}; T=0 joint == STL: {joint_ok}"),
    )
}

fn gradient_suite() -> Outcome {
    let mut worst = (0.0f64, "");
    let mut worst_hvp = 0.0f64;
    let mut ops = 0;
    for seed in 0..20 {
        let cases = common::op_cases(seed);
        ops = cases.len();
        for case in cases {
            let err = common::gradcheck(case.loss.as_ref(), &case.params, 1e-5);
            if err > worst.0 {
                worst = (err, case.name);
            }
            let mut r = metamtl::rng::rng(1000 + seed);
            let v: Vec<Tensor> = case.params.iter().map(|p| Tensor::uniform(p.shape(), -1.0, 1.0, &mut r)).collect();
            let exact = hvp(case.loss.as_ref(), &case.params, &v, HvpMode::Exact).map_err(|e| e.to_string())?;
            let fd = hvp(case.loss.as_ref(), &case.params, &v, HvpMode::FiniteDifference { eps: 1e-5 })
                .map_err(|e| e.to_string())?;
            let scale = exact.iter().chain(&fd).flat_map(|t| t.data().iter().map(|x| x.abs())).fold(1.0f64, f64::max);
            for (a, b) in exact.iter().zip(&fd) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    worst_hvp = worst_hvp.max((x - y).abs() / scale);
                }
            }
        }
    }
    check(
        worst.0 < 1e-4,
        format!(
            "{ops} ops x 20 random shapes; worst rel err {:.2e} ({}); second-order worst scaled diff {worst_hvp:.2e}",
            worst.0, worst.1
        ),
    )
}

fn matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let t = Tensor::uniform(&[n * d], -5.0, 5.0, &mut metamtl::rng::rng(seed));
    EmbeddingMatrix::new(n, d, t.into_data(), EmbeddingSource::Imported).unwrap()
}

fn kmeans_properties() -> Outcome {
    let mut monotone = 0;
    for seed in 0..100u64 {
        let z = matrix(30 + seed as usize, 3, seed);
        let km = kmeans(&z, 2 + seed as usize % 5, KMEANS_MAX_ITER, KMEANS_TOL, seed).map_err(|e| e.to_string())?;
        if km.inertia_history.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    let (data, z) = synth_blobs(5, 40, 3, 0.5, 11).unwrap();
    let km = kmeans(&z, 5, KMEANS_MAX_ITER, KMEANS_TOL, 2).unwrap();
    let nmi = cluster_nmi(&km.assignments, data.labels().unwrap()).unwrap();
    let mut near = 0;
    for seed in 0..100u64 {
        let z = matrix(8, 2, 1000 + seed);
        let pts: Vec<[f64; 2]> = (0..8).map(|i| [z.row(i)[0], z.row(i)[1]]).collect();
        let best = common::brute_force_two_means(&pts);
        let km = kmeans(&z, 2, KMEANS_MAX_ITER, KMEANS_TOL, seed).unwrap();
        if km.inertia <= 1.05 * best {
            near += 1;
        }
    }
    check(
        monotone == 100 && nmi == 1.0 && near >= 95,
        format!("monotone inertia {monotone}/100; blob NMI {nmi}; within 5% of exhaustive optimum {near}/100 (>= 95)"),
    )
}

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn quick_blobs(out: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&config_path("blobs_quick.toml")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.train.episodes = 60;
    cfg
}

fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut configs = vec![quick_blobs(dir.path())];
    for regime in [experiment::Regime::Stl, experiment::Regime::MtlJoint] {
        let mut c = quick_blobs(dir.path());
        c.regime = regime;
        configs.push(c);
    }
    if common::mnist_dir().is_some() {
        let mut c = ExperimentConfig::load(&config_path("meta_mtl.toml")).unwrap();
        c.output_dir = dir.path().to_path_buf();
        c.train.episodes = 20;
        c.autoencoder.epochs = 1;
        configs.push(c);
    }
    let mut compared = 0;
    for cfg in &configs {
        let a = experiment::run(cfg).map_err(|e| e.to_string())?;
        let b = experiment::run(cfg).map_err(|e| e.to_string())?;
        for f in ["metrics.csv", "model.ckpt"] {
            let fa = std::fs::read(a.run_dir.as_ref().unwrap().join(f)).unwrap();
            let fb = std::fs::read(b.run_dir.as_ref().unwrap().join(f)).unwrap();
            if fa != fb {
                return Err(format!("{f} differs between reruns of {} on {}", cfg.regime.as_str(), a.dataset));
            }
            compared += 1;
        }
    }
    check(true, format!("{compared} artifact pairs byte-identical across {} configs", configs.len()))
}

struct SeedResult {
    stl: RunReport,
    meta: RunReport,
}

fn mnist_runs() -> std::result::Result<Vec<SeedResult>, String> {
    if common::mnist_dir().is_none() {
        return Err("MNIST IDX files not found under data/mnist (see scripts/fetch_mnist.sh)".into());
    }
    let load = |name: &str, seed: u64| -> std::result::Result<ExperimentConfig, String> {
        let mut cfg = ExperimentConfig::load(&config_path(name)).map_err(|e| e.to_string())?;
        cfg.seed = seed;
        if let Some(dir) = common::mnist_dir() {
            cfg.data.source = experiment::DataSource::Mnist { dir };
        }
        Ok(cfg)
    };
    let mut out = Vec::new();
    for seed in 0..3 {
        let t = Instant::now();
        let stl = experiment::execute(&load("stl.toml", seed)?).map_err(|e| e.to_string())?.report;
        let meta = experiment::execute(&load("meta_mtl.toml", seed)?).map_err(|e| e.to_string())?.report;
        println!(
            "  seed {seed}: STL {:.2}%  Meta-MTL {:.2}%  partition NMI {:?}  random NMI {:.4}  ({:.0} s)",
            100.0 * stl.accuracy["test"],
            100.0 * meta.accuracy["test"],
            meta.partition_nmi.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
            meta.random_label_nmi.unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
        out.push(SeedResult { stl, meta });
    }
    Ok(out)
}

fn mnist_accuracy(runs: &[SeedResult]) -> Outcome {
    let n = runs.len() as f64;
    let stl = runs.iter().map(|r| 100.0 * r.stl.accuracy["test"]).sum::<f64>() / n;
    let gap = runs.iter().map(|r| 100.0 * (r.meta.accuracy["test"] - r.stl.accuracy["test"])).sum::<f64>() / n;
    check(
        (89.0..=93.0).contains(&stl) && gap >= 0.5,
        format!("mean STL {stl:.2}% (in [89, 93]); mean Meta-MTL gain {gap:+.2} points (>= 0.5)"),
    )
}

fn pseudo_label_signal(runs: &[SeedResult]) -> Outcome {
    let kmeans: Vec<f64> = runs.iter().flat_map(|r| r.meta.partition_nmi.iter().copied()).collect();
    let random: Vec<f64> = runs.iter().filter_map(|r| r.meta.random_label_nmi).collect();
    let mk = kmeans.iter().sum::<f64>() / kmeans.len() as f64;
    let mr = random.iter().sum::<f64>() / random.len() as f64;
    check(
        mk >= 5.0 * mr,
        format!("mean k-means NMI {mk:.4} over {} partitions vs random {mr:.4}: ratio {:.1} (>= 5)", kmeans.len(), mk / mr),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, outcome: Outcome| {
        match outcome {
            Ok(detail) => println!("criterion {n} [{name}]: PASS - {detail}"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} [{name}]: FAIL - {detail}");
            }
        }
    };
    report(2, "meta-gradient", meta_gradient());
    report(3, "reduction identities", reductions());
    report(4, "gradient suite", gradient_suite());
    report(5, "k-means properties", kmeans_properties());
    report(7, "reproducibility", reproducibility());
    match mnist_runs() {
        Ok(runs) => {
            report(1, "MNIST 1% labels", mnist_accuracy(&runs));
            report(6, "pseudo-label signal", pseudo_label_signal(&runs));
        }
        Err(e) => {
            report(1, "MNIST 1% labels", Err(e.clone()));
            report(6, "pseudo-label signal", Err(e));
        }
    }
    if failures > 0 {
        println!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
