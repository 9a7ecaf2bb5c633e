mod common;

use metamtl::data::synth_blobs;
use metamtl::embedding::{EmbeddingMatrix, EmbeddingSource};
use metamtl::taskgen::*;
use metamtl::Error;
use proptest::prelude::*;

fn matrix(n: usize, d: usize, rows: Vec<f64>) -> EmbeddingMatrix {
    EmbeddingMatrix::new(n, d, rows, EmbeddingSource::Imported).unwrap()
}

fn random_matrix(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
    let t = metamtl::Tensor::uniform(&[n * d], -5.0, 5.0, &mut metamtl::rng::rng(seed));
    matrix(n, d, t.into_data())
}

fn run(z: &EmbeddingMatrix, k: usize, seed: u64) -> KMeansResult {
    kmeans(z, k, KMEANS_MAX_ITER, KMEANS_TOL, seed).unwrap()
}

#[test]
fn two_point_blobs() {
    let mut rows = Vec::new();
    for _ in 0..10 {
        rows.extend([0.0, 0.0]);
    }
    for _ in 0..10 {
        rows.extend([10.0, 10.0]);
    }
    let km = run(&matrix(20, 2, rows), 2, 1);
    assert_eq!(km.inertia, 0.0);
    let a = km.assignments[0];
    assert!(km.assignments[..10].iter().all(|&c| c == a));
    assert!(km.assignments[10..].iter().all(|&c| c == 1 - a));
    assert_eq!(&km.centroids[2 * a..2 * a + 2], &[0.0, 0.0]);
    assert_eq!(&km.centroids[2 * (1 - a)..2 * (1 - a) + 2], &[10.0, 10.0]);
}

#[test]
fn one_cluster_per_point() {
    let z = random_matrix(9, 3, 4);
    let km = run(&z, 9, 0);
    assert_eq!(km.inertia, 0.0);
    let mut seen = km.assignments.clone();
    seen.sort_unstable();
    assert_eq!(seen, (0..9).collect::<Vec<_>>());
}

#[test]
fn kmeans_argument_errors() {
    let z = random_matrix(5, 2, 0);
    assert!(matches!(kmeans(&z, 6, 10, 1e-6, 0), Err(Error::Parameter(_))));
    assert!(matches!(kmeans(&z, 1, 10, 1e-6, 0), Err(Error::Parameter(_))));
}

#[test]
fn inertia_never_increases_on_random_instances() {
    for seed in 0..100 {
        let z = random_matrix(30 + seed as usize, 3, seed);
        let km = run(&z, 2 + (seed as usize % 5), seed);
        for w in km.inertia_history.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "seed {seed}: {:?}", km.inertia_history);
        }
        assert!(km.inertia >= 0.0);
    }
}

#[test]
fn centroids_are_means_of_their_points() {
    let z = random_matrix(200, 4, 7);
    let km = run(&z, 5, 3);
    for c in 0..5 {
        let members: Vec<usize> = (0..z.n).filter(|&i| km.assignments[i] == c).collect();
        assert!(!members.is_empty());
        for j in 0..4 {
            let mean = members.iter().map(|&i| z.row(i)[j]).sum::<f64>() / members.len() as f64;
            assert!((mean - km.centroids[c * 4 + j]).abs() < 1e-12);
        }
    }
}

#[test]
fn blobs_are_recovered_exactly() {
    let (data, z) = synth_blobs(5, 40, 3, 0.5, 11).unwrap();
    let km = run(&z, 5, 2);
    assert_eq!(cluster_nmi(&km.assignments, data.labels().unwrap()).unwrap(), 1.0);
}

#[test]
fn near_exhaustive_optimum_on_small_instances() {
    let mut good = 0;
    for seed in 0..100u64 {
        let z = random_matrix(8, 2, 1000 + seed);
        let pts: Vec<[f64; 2]> = (0..8).map(|i| [z.row(i)[0], z.row(i)[1]]).collect();
        let best = common::brute_force_two_means(&pts);
        let km = run(&z, 2, seed);
        assert!(km.inertia >= best - 1e-9);
        if km.inertia <= 1.05 * best {
            good += 1;
        }
    }
    assert!(good >= 95, "{good}/100 within 5% of the optimum");
}

#[test]
fn reproducible_across_worker_counts() {
    let z = random_matrix(3000, 5, 9);
    let a = run(&z, 7, 1);
    let b = metamtl::parallel::sequential(|| run(&z, 7, 1));
    assert_eq!(a, b);
}

#[test]
fn nmi_values() {
    let x = vec![0, 0, 1, 1, 2, 2, 2];
    assert_eq!(cluster_nmi(&x, &x).unwrap(), 1.0);
    let relabeled: Vec<usize> = x.iter().map(|&c| [5, 9, 1][c]).collect();
    assert!((cluster_nmi(&x, &relabeled).unwrap() - 1.0).abs() < 1e-15);

    let a = [0, 0, 1, 1, 2, 2];
    let b = [0, 1, 1, 1, 0, 2];
    let want = common::nmi_formula(&a, &b);
    assert!((cluster_nmi(&a, &b).unwrap() - want).abs() < 1e-12);

    assert!(matches!(cluster_nmi(&[], &[]), Err(Error::Data(_))));
    assert!(cluster_nmi(&[0, 1], &[0]).is_err());
}

#[test]
fn transforms() {
    let z = random_matrix(10, 4, 3);
    assert_eq!(scale_columns(&z, &[1.0; 4]).unwrap(), z);

    let half = TransformMode { kind: TransformKind::HalfDims, seed: 5 };
    let zh = transform_embedding(&z, half).unwrap();
    assert_eq!(zh.d, 2);
    let mask = half_dims_mask(4, 5).unwrap();
    for i in 0..z.n {
        assert_eq!(zh.row(i), [z.row(i)[mask[0]], z.row(i)[mask[1]]]);
    }
    let tiny = random_matrix(3, 1, 0);
    assert!(matches!(transform_embedding(&tiny, half), Err(Error::Parameter(_))));

    let scaled = TransformMode { kind: TransformKind::RandomScaling, seed: 5 };
    assert_eq!(transform_embedding(&z, scaled).unwrap(), transform_embedding(&z, scaled).unwrap());
    let f5 = scaling_factors(4, 5);
    assert_ne!(f5, scaling_factors(4, 6));
    assert!(f5.iter().all(|&s| (0.0..1.0).contains(&s)));
}

#[test]
fn partitions_and_tasks() {
    let (data, z) = synth_blobs(4, 30, 6, 2.0, 1).unwrap();
    let one = make_partitions(&z, 1, 4, TransformKind::RandomScaling, 9).unwrap();
    assert_eq!(one.len(), 1);
    let parts = make_partitions(&z, 4, 4, TransformKind::HalfDims, 9).unwrap();
    assert_eq!(parts, make_partitions(&z, 4, 4, TransformKind::HalfDims, 9).unwrap());
    for (t, p) in parts.iter().enumerate() {
        assert_eq!(p.seed, 9 ^ t as u64);
        assert!(p.assignments.iter().all(|&c| c < 4));
    }
    assert!(matches!(make_partitions(&z, 0, 4, TransformKind::HalfDims, 9), Err(Error::Parameter(_))));

    let task = partition_to_task(&parts[0], &data, 1).unwrap();
    assert_eq!(task.pseudo_labels, parts[0].assignments);
    assert_eq!(task.num_classes, 4);
    let aux = task.dataset(&data).unwrap();
    assert_eq!(aux.labels().unwrap(), parts[0].assignments.as_slice());
    assert_eq!(aux.inputs, data.inputs);

    let short = data.subset(&[0, 1, 2]).unwrap();
    assert!(matches!(partition_to_task(&parts[0], &short, 1), Err(Error::Data(_))));
    let mut degenerate = parts[0].clone();
    degenerate.k = 1;
    assert!(partition_to_task(&degenerate, &data, 1).is_err());

    let text = parts[2].to_text();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), format!("k=4,transform=half_dims,seed={}", 9 ^ 2));
    assert_eq!(lines.next().unwrap(), format!("0,{}", parts[2].assignments[0]));
    assert_eq!(text.lines().count(), data.len() + 1);
}

#[test]
fn kmeans_labels_carry_more_signal_than_random_ones() {
    let (data, z) = synth_blobs(6, 50, 8, 3.0, 2).unwrap();
    let truth = data.labels().unwrap();
    let parts = make_partitions(&z, 4, 6, TransformKind::RandomScaling, 3).unwrap();
    let random = random_partition(data.len(), 6, 3).unwrap();
    let rand_nmi = cluster_nmi(&random.assignments, truth).unwrap();
    for p in &parts {
        assert!(cluster_nmi(&p.assignments, truth).unwrap() > rand_nmi);
    }
}

proptest! {
    #[test]
    fn translation_does_not_change_assignments(seed in 0u64..500, shift in prop::array::uniform3(-50.0f64..50.0)) {
        let z = random_matrix(40, 3, seed);
        let moved: Vec<f64> = z.rows.chunks(3).flat_map(|r| r.iter().zip(&shift).map(|(x, s)| x + s)).collect();
        let a = run(&z, 3, seed);
        let b = run(&matrix(40, 3, moved), 3, seed);
        prop_assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn half_dims_is_a_projection(seed in 0u64..1000, d in 2usize..12) {
        let z = random_matrix(5, d, seed);
        let mask = half_dims_mask(d, seed).unwrap();
        prop_assert_eq!(mask.len(), d / 2);
        // Reapplying the mask, re-indexed into the projected space, is a no-op.
        let once = project(&z, &mask).unwrap();
        let twice = project(&once, &(0..mask.len()).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn assignments_form_a_partition(seed in 0u64..1000, n in 2usize..60, k in 2usize..6) {
        prop_assume!(k <= n);
        let km = run(&random_matrix(n, 2, seed), k, seed);
        prop_assert_eq!(km.assignments.len(), n);
        prop_assert!(km.assignments.iter().all(|&c| c < k));
    }
}
