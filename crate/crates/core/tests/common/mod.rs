//! Test-only oracles: central finite differences, brute-force k-means, and a
//! direct NMI formula. None of these call into the code paths they check
//! beyond plain forward evaluation.
#![allow(dead_code)]

use std::path::PathBuf;

use metamtl::{Graph, Result, Tensor, Var};

pub type LossFn<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// Forward-only evaluation with every parameter as a constant.
pub fn eval(f: &LossFn, params: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    g.value(out).item().unwrap()
}

/// Central-difference gradient of `f` at `params`.
pub fn numeric_grad(f: &LossFn, params: &[Tensor], eps: f64) -> Vec<Tensor> {
    let mut out = Vec::new();
    for i in 0..params.len() {
        let mut gi = vec![0.0; params[i].numel()];
        for (j, gij) in gi.iter_mut().enumerate() {
            let mut p = params.to_vec();
            let x0 = p[i].data()[j];
            p[i].data_mut()[j] = x0 + eps;
            let up = eval(f, &p);
            p[i].data_mut()[j] = x0 - eps;
            let down = eval(f, &p);
            *gij = (up - down) / (2.0 * eps);
        }
        out.push(Tensor::new(params[i].shape().to_vec(), gi).unwrap());
    }
    out
}

/// `|a − b| / max(|a|, |b|, floor)`, maximized over all entries.
pub fn max_rel_err(a: &[Tensor], b: &[Tensor], floor: f64) -> f64 {
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        for (&u, &v) in x.data().iter().zip(y.data()) {
            let e = (u - v).abs() / u.abs().max(v.abs()).max(floor);
            worst = worst.max(e);
        }
    }
    worst
}

/// Analytic-vs-numeric gradient error for `f` at `params`.
pub fn gradcheck(f: &LossFn, params: &[Tensor], eps: f64) -> f64 {
    let (_, analytic) = metamtl::tensor::gradient(&f, params).unwrap();
    let numeric = numeric_grad(f, params, eps);
    max_rel_err(&analytic, &numeric, 1e-6)
}

/// Exhaustive minimum of the k=2 k-means objective over all 2ⁿ assignments.
pub fn brute_force_two_means(points: &[[f64; 2]]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let mut cost = 0.0;
        for side in [0u32, 1] {
            let members: Vec<&[f64; 2]> = (0..n)
                .filter(|&i| (mask >> i) & 1 == side)
                .map(|i| &points[i])
                .collect();
            let m = members.len() as f64;
            let cx = members.iter().map(|p| p[0]).sum::<f64>() / m;
            let cy = members.iter().map(|p| p[1]).sum::<f64>() / m;
            cost += members
                .iter()
                .map(|p| (p[0] - cx).powi(2) + (p[1] - cy).powi(2))
                .sum::<f64>();
        }
        best = best.min(cost);
    }
    best
}

/// NMI with arithmetic-mean normalization, straight from the contingency table.
pub fn nmi_formula(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len() as f64;
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0.0; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..kb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    let h = |v: &[f64]| -> f64 {
        v.iter().filter(|&&c| c > 0.0).map(|&c| -(c / n) * (c / n).ln()).sum()
    };
    let mut mi = 0.0;
    for i in 0..ka {
        for j in 0..kb {
            let c = table[i][j];
            if c > 0.0 {
                mi += (c / n) * ((n * c) / (row[i] * col[j])).ln();
            }
        }
    }
    mi / ((h(&row) + h(&col)) / 2.0)
}

/// Directory holding the four MNIST IDX files, if present.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var("MMTL_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-images-idx3-ubyte").exists().then_some(dir)
}

pub struct OpCase {
    pub name: &'static str,
    pub loss: Box<LossFn<'static>>,
    pub params: Vec<Tensor>,
}

fn rnd(shape: &[usize], rng: &mut metamtl::rng::Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so relu kinks stay outside the FD stencil.
fn away_from_zero(shape: &[usize], rng: &mut metamtl::rng::Rng) -> Tensor {
    rnd(shape, rng).map(|v| if v >= 0.0 { v + 0.05 } else { v - 0.05 })
}

/// Distinct values (spacing 1e-2) so max-pool winners are stable under FD.
fn distinct(shape: &[usize], rng: &mut metamtl::rng::Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 1e-2).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// `Σ r ⊙ y` for a fixed random `r`, turning any output into a scalar.
fn weighted(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    g.dot(y, rv)
}

fn case<F>(name: &'static str, params: Vec<Tensor>, out_shape: &[usize], seed: u64, f: F) -> OpCase
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
{
    let r = Tensor::uniform(out_shape, -1.0, 1.0, &mut metamtl::rng::rng(seed));
    OpCase {
        name,
        params,
        loss: Box::new(move |g, p| {
            let y = f(g, p)?;
            weighted(g, y, &r)
        }),
    }
}

/// Random conv geometry `(n, c, h, w, f, k, stride, pad, oh, ow)` whose window
/// tiles the padded input exactly.
fn conv_geometry(rng: &mut metamtl::rng::Rng) -> [usize; 10] {
    use rand::Rng;
    let n: usize = rng.random_range(1..3);
    let c: usize = rng.random_range(1..4);
    let f: usize = rng.random_range(1..4);
    let k: usize = rng.random_range(1..4);
    let s: usize = rng.random_range(1..3);
    let oh: usize = rng.random_range(1..4);
    let ow: usize = rng.random_range(1..4);
    let mut p: usize = rng.random_range(0..2usize).min(k - 1);
    if (oh.min(ow) - 1) * s + k <= 2 * p {
        p = 0;
    }
    let h = (oh - 1) * s + k - 2 * p;
    let w = (ow - 1) * s + k - 2 * p;
    [n, c, h, w, f, k, s, p, oh, ow]
}

/// One randomly shaped instance of every differentiable operation.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use rand::Rng;
    use std::sync::Arc;
    let mut rng = metamtl::rng::rng(seed);
    let dim = |lo: usize, hi: usize, rng: &mut metamtl::rng::Rng| rng.random_range(lo..=hi);
    let mut cases = Vec::new();

    let (m, n) = (dim(1, 4, &mut rng), dim(1, 5, &mut rng));
    let s = [m, n];
    cases.push(case("add", vec![rnd(&s, &mut rng), rnd(&s, &mut rng)], &s, seed, |g, p| g.add(p[0], p[1])));
    cases.push(case("sub", vec![rnd(&s, &mut rng), rnd(&s, &mut rng)], &s, seed, |g, p| g.sub(p[0], p[1])));
    cases.push(case("mul", vec![rnd(&s, &mut rng), rnd(&s, &mut rng)], &s, seed, |g, p| g.mul(p[0], p[1])));
    let c: f64 = rng.random_range(-2.0..2.0);
    cases.push(case("scale", vec![rnd(&s, &mut rng)], &s, seed, move |g, p| Ok(g.scale(p[0], c))));
    cases.push(case("exp", vec![rnd(&s, &mut rng)], &s, seed, |g, p| Ok(g.exp(p[0]))));
    cases.push(case("relu", vec![away_from_zero(&s, &mut rng)], &s, seed, |g, p| Ok(g.relu(p[0]))));

    let (m, k, n) = (dim(1, 4, &mut rng), dim(1, 4, &mut rng), dim(1, 4, &mut rng));
    for (name, ta, tb) in [
        ("matmul", false, false),
        ("matmul_ta", true, false),
        ("matmul_tb", false, true),
        ("matmul_ta_tb", true, true),
    ] {
        let sa = if ta { [k, m] } else { [m, k] };
        let sb = if tb { [n, k] } else { [k, n] };
        cases.push(case(name, vec![rnd(&sa, &mut rng), rnd(&sb, &mut rng)], &[m, n], seed, move |g, p| {
            g.matmul_t(p[0], p[1], ta, tb)
        }));
    }

    let (a, b, c3) = (dim(1, 3, &mut rng), dim(1, 3, &mut rng), dim(1, 3, &mut rng));
    cases.push(case("reshape", vec![rnd(&[a, b, c3], &mut rng)], &[a * b * c3], seed, move |g, p| {
        g.reshape(p[0], &[a * b * c3])
    }));
    let s4 = [a, b, c3, dim(1, 3, &mut rng)];
    cases.push(case("add_bias", vec![rnd(&s4, &mut rng), rnd(&[b], &mut rng)], &s4, seed, |g, p| {
        g.add_bias(p[0], p[1])
    }));
    cases.push(case("sum_axis1", vec![rnd(&s4, &mut rng)], &[b], seed, |g, p| g.sum_axis1(p[0])));
    cases.push(case("broadcast_axis1", vec![rnd(&[b], &mut rng)], &s4, seed, move |g, p| {
        g.broadcast_axis1(p[0], &s4)
    }));
    cases.push(case("sum_all", vec![rnd(&s4, &mut rng)], &[], seed, |g, p| Ok(g.sum_all(p[0]))));
    cases.push(case("expand", vec![rnd(&[], &mut rng)], &s4, seed, move |g, p| g.expand(p[0], &s4)));
    let (r, l) = (dim(1, 4, &mut rng), dim(2, 5, &mut rng));
    cases.push(case("sum_last", vec![rnd(&[r, l], &mut rng)], &[r, 1], seed, |g, p| g.sum_last(p[0])));
    cases.push(case("expand_last", vec![rnd(&[r, 1], &mut rng)], &[r, l], seed, move |g, p| {
        g.expand_last(p[0], l)
    }));
    cases.push(case("log_softmax", vec![rnd(&[r, l], &mut rng).map(|v| 3.0 * v)], &[r, l], seed, |g, p| {
        g.log_softmax(p[0])
    }));

    let src = r * l;
    let count = dim(1, 8, &mut rng);
    let idx: Arc<Vec<usize>> = Arc::new((0..count).map(|_| rng.random_range(0..src)).collect());
    let gi = idx.clone();
    cases.push(case("gather", vec![rnd(&[r, l], &mut rng)], &[count], seed, move |g, p| {
        g.gather(p[0], gi.clone(), &[count])
    }));
    cases.push(case("scatter_add", vec![rnd(&[count], &mut rng)], &[r, l], seed, move |g, p| {
        g.scatter_add(p[0], idx.clone(), &[r, l])
    }));

    let [n, c, h, w, f, k, st, pd, oh, ow] = conv_geometry(&mut rng);
    cases.push(case(
        "conv2d",
        vec![rnd(&[n, c, h, w], &mut rng), rnd(&[f, c, k, k], &mut rng)],
        &[n, f, oh, ow],
        seed,
        move |g, p| g.conv2d(p[0], p[1], st, pd),
    ));
    cases.push(case(
        "conv2d_transpose",
        vec![rnd(&[n, f, oh, ow], &mut rng), rnd(&[f, c, k, k], &mut rng)],
        &[n, c, h, w],
        seed,
        move |g, p| g.conv2d_transpose(p[0], p[1], st, pd, (h, w)),
    ));
    cases.push(case(
        "conv2d_weight_grad",
        vec![rnd(&[n, c, h, w], &mut rng), rnd(&[n, f, oh, ow], &mut rng)],
        &[f, c, k, k],
        seed,
        move |g, p| g.conv2d_weight_grad(p[0], p[1], st, pd, (k, k)),
    ));

    let win = dim(1, 3, &mut rng);
    let stride = dim(1, win, &mut rng);
    let (ph, pw) = (dim(win, 6, &mut rng), dim(win, 6, &mut rng));
    let (pc, pn) = (dim(1, 2, &mut rng), dim(1, 2, &mut rng));
    let out = [pn, pc, (ph - win) / stride + 1, (pw - win) / stride + 1];
    cases.push(case("maxpool2d", vec![distinct(&[pn, pc, ph, pw], &mut rng)], &out, seed, move |g, p| {
        g.maxpool2d(p[0], win, stride)
    }));

    let ds = [dim(1, 4, &mut rng), dim(1, 6, &mut rng)];
    let dseed = rng.random::<u64>();
    cases.push(case("dropout", vec![rnd(&ds, &mut rng)], &ds, seed, move |g, p| {
        g.dropout(p[0], 0.5, true, dseed)
    }));

    let (bn, din, dout) = (dim(1, 4, &mut rng), dim(1, 5, &mut rng), dim(1, 4, &mut rng));
    cases.push(case(
        "dense",
        vec![rnd(&[bn, din], &mut rng), rnd(&[din, dout], &mut rng), rnd(&[dout], &mut rng)],
        &[bn, dout],
        seed,
        |g, p| g.dense(p[0], p[1], p[2]),
    ));

    let (bn, classes) = (dim(1, 5, &mut rng), dim(2, 6, &mut rng));
    let labels: Vec<usize> = (0..bn).map(|_| rng.random_range(0..classes)).collect();
    cases.push(OpCase {
        name: "softmax_cross_entropy",
        params: vec![rnd(&[bn, classes], &mut rng).map(|v| 2.0 * v)],
        loss: Box::new(move |g, p| g.softmax_cross_entropy(p[0], &labels)),
    });
    let ms = [dim(1, 4, &mut rng), dim(1, 4, &mut rng)];
    let target = rnd(&ms, &mut rng);
    cases.push(OpCase {
        name: "mse",
        params: vec![rnd(&ms, &mut rng)],
        loss: Box::new(move |g, p| g.mse(p[0], &target)),
    });
    cases
}
