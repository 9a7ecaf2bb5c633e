use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::parallel;
use rand::Rng;

/// Points per chunk in the parallel assignment step. Fixed so partial sums
/// combine identically for every worker count.
const ASSIGN_CHUNK: usize = 512;

/// Independent k-means++ starts per call; the lowest final inertia wins.
const RESTARTS: u64 = 10;

/// Result of one k-means run.
#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub k: usize,
    pub d: usize,
    /// `k × d`, row-major. Each row is the mean of its assigned points.
    pub centroids: Vec<f64>,
    /// Sum of squared distances of points to their assigned centroid.
    pub inertia: f64,
    /// Objective after every assignment step, ending with the final value.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid of every point (lowest index on ties) and the summed
/// squared distance.
fn assign(z: &EmbeddingMatrix, centroids: &[f64], k: usize) -> (Vec<usize>, f64) {
    let d = z.d;
    let parts = parallel::map_chunks(z.n, ASSIGN_CHUNK, |range| {
        let mut labels = Vec::with_capacity(range.len());
        let mut total = 0.0;
        for i in range {
            let p = z.row(i);
            let (best, dist) = (0..k)
                .map(|c| (c, sq_dist(p, &centroids[c * d..(c + 1) * d])))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            labels.push(best);
            total += dist;
        }
        (labels, total)
    });
    let mut labels = Vec::with_capacity(z.n);
    let mut total = 0.0;
    for (l, t) in parts {
        labels.extend(l);
        total += t;
    }
    (labels, total)
}

fn inertia_of(z: &EmbeddingMatrix, labels: &[usize], centroids: &[f64]) -> f64 {
    let d = z.d;
    let parts = parallel::map_chunks(z.n, ASSIGN_CHUNK, |range| {
        range
            .map(|i| sq_dist(z.row(i), &centroids[labels[i] * d..(labels[i] + 1) * d]))
            .sum::<f64>()
    });
    parts.into_iter().sum()
}

/// Cluster means in index order; empty clusters keep their previous centroid
/// and are reported.
fn means(z: &EmbeddingMatrix, labels: &[usize], k: usize, prev: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let d = z.d;
    let mut sums = vec![0.0; k * d];
    let mut counts = vec![0usize; k];
    for (i, &c) in labels.iter().enumerate() {
        counts[c] += 1;
        for (s, &x) in sums[c * d..(c + 1) * d].iter_mut().zip(z.row(i)) {
            *s += x;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for s in &mut sums[c * d..(c + 1) * d] {
                *s /= counts[c] as f64;
            }
        } else {
            sums[c * d..(c + 1) * d].copy_from_slice(&prev[c * d..(c + 1) * d]);
        }
    }
    (sums, counts)
}

/// Moves, for each empty cluster, the point farthest from its centroid into
/// it. Every move lowers the objective, so the inertia sequence stays
/// non-increasing.
fn repair_empty(z: &EmbeddingMatrix, labels: &mut [usize], centroids: &mut [f64], counts: &mut [usize]) {
    let d = z.d;
    let k = counts.len();
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let far = (0..z.n)
            .filter(|&i| counts[labels[i]] > 1)
            .map(|i| (i, sq_dist(z.row(i), &centroids[labels[i] * d..(labels[i] + 1) * d])))
            .fold(None::<(usize, f64)>, |acc, x| match acc {
                Some(a) if a.1 >= x.1 => Some(a),
                _ => Some(x),
            });
        let Some((i, _)) = far else { break };
        let from = labels[i];
        labels[i] = empty;
        counts[from] -= 1;
        counts[empty] = 1;
        centroids[empty * d..(empty + 1) * d].copy_from_slice(z.row(i));
        let (m, _) = means(z, labels, k, centroids);
        centroids[from * d..(from + 1) * d].copy_from_slice(&m[from * d..(from + 1) * d]);
    }
}

/// k-means++ seeding: first centre uniform, then proportional to squared
/// distance from the nearest chosen centre.
fn seed_centroids(z: &EmbeddingMatrix, k: usize, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let mut chosen = vec![rng.random_range(0..z.n)];
    let mut nearest: Vec<f64> = (0..z.n).map(|i| sq_dist(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = z.n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                acc += w;
                if acc > u && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // Every point coincides with a centre; any unused index will do.
            let free: Vec<usize> = (0..z.n).filter(|i| !chosen.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen.push(next);
        for (i, w) in nearest.iter_mut().enumerate() {
            *w = w.min(sq_dist(z.row(i), z.row(next)));
        }
    }
    chosen.iter().flat_map(|&i| z.row(i).iter().copied()).collect()
}

/// Best of several Lloyd runs, each from its own k-means++ start.
///
/// A run stops when the assignment no longer changes, when the relative
/// improvement of the objective drops to `tol` or below, or after `max_iter`
/// assignment steps. `inertia_history` belongs to the winning run.
pub fn kmeans(z: &EmbeddingMatrix, k: usize, max_iter: usize, tol: f64, seed: u64) -> Result<KMeansResult> {
    if z.n == 0 {
        return Err(Error::Data("k-means on an empty embedding".into()));
    }
    if k < 2 {
        return Err(Error::Parameter(format!("k = {k}; at least 2 clusters are required")));
    }
    if k > z.n {
        return Err(Error::Parameter(format!("k = {k} exceeds {} points", z.n)));
    }
    if max_iter == 0 || tol.is_nan() || tol < 0.0 {
        return Err(Error::Parameter("max_iter must be positive and tol non-negative".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for start in 0..RESTARTS {
        let run = lloyd(z, k, max_iter, tol, crate::rng::derive(seed, start));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one start"))
}

/// One Lloyd run from a k-means++ start drawn with `seed`.
fn lloyd(z: &EmbeddingMatrix, k: usize, max_iter: usize, tol: f64, seed: u64) -> KMeansResult {
    let mut rng = crate::rng::rng(seed);
    let mut centroids = seed_centroids(z, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (next, obj) = assign(z, &centroids, k);
        iterations += 1;
        let stable = next == labels;
        labels = next;
        let small_gain = history
            .last()
            .is_some_and(|&prev: &f64| prev - obj <= tol * prev);
        history.push(obj);
        let (m, mut counts) = means(z, &labels, k, &centroids);
        centroids = m;
        repair_empty(z, &mut labels, &mut centroids, &mut counts);
        if stable || small_gain || iterations >= max_iter {
            break;
        }
    }
    let inertia = inertia_of(z, &labels, &centroids);
    history.push(inertia);
    KMeansResult {
        assignments: labels,
        k,
        d: z.d,
        centroids,
        inertia,
        inertia_history: history,
        iterations,
    }
}
