use std::collections::BTreeSet;

use proptest::prelude::*;
use subuda::clustering::{build_subgraphs, connected_components, kmeans, KMeansConfig};
use subuda::linalg::{sq_dist, Matrix};
use subuda::rng::Rng;

fn random_points(rng: &mut Rng, n: usize, dim: usize, spread: f64) -> Matrix {
    let data = (0..n * dim).map(|_| spread * rng.uniform()).collect();
    Matrix::from_vec(n, dim, data).unwrap()
}

/// Reachability by repeated relaxation over the full adjacency matrix.
fn closure_components(points: &Matrix, eps: f64) -> BTreeSet<BTreeSet<usize>> {
    let n = points.rows();
    let mut reach = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            reach[i][j] = i == j || sq_dist(points.row(i), points.row(j)) <= eps;
        }
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                for j in 0..n {
                    if reach[k][j] {
                        reach[i][j] = true;
                    }
                }
            }
        }
    }
    (0..n).map(|i| (0..n).filter(|&j| reach[i][j]).collect()).collect()
}

fn as_sets(groups: &[Vec<usize>]) -> BTreeSet<BTreeSet<usize>> {
    groups.iter().map(|g| g.iter().copied().collect()).collect()
}

/// Best objective over every assignment of the points to exactly `k` non-empty groups.
fn exhaustive_optimum(points: &Matrix, k: usize) -> f64 {
    let n = points.rows();
    let dim = points.cols();
    let mut best = f64::INFINITY;
    let mut labels = vec![0usize; n];
    loop {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        if counts.iter().all(|&c| c > 0) {
            let obj: f64 = labels
                .iter()
                .enumerate()
                .map(|(i, &l)| {
                    let c: Vec<f64> = sums[l].iter().map(|s| s / counts[l] as f64).collect();
                    sq_dist(points.row(i), &c)
                })
                .sum();
            best = best.min(obj);
        }
        // Next assignment in base k.
        let mut pos = 0;
        while pos < n {
            labels[pos] += 1;
            if labels[pos] < k {
                break;
            }
            labels[pos] = 0;
            pos += 1;
        }
        if pos == n {
            return best;
        }
    }
}

#[test]
fn subgraphs_match_transitive_closure_on_random_instances() {
    let mut rng = Rng::new(2024);
    for _ in 0..200 {
        let n = 1 + rng.below(200);
        let dim = 1 + rng.below(3);
        let pts = random_points(&mut rng, n, dim, 10.0);
        let eps = rng.uniform_range(0.05, 4.0);
        let comps = connected_components(&pts, eps);
        assert_eq!(as_sets(&comps), closure_components(&pts, eps));
        let m = 1 + rng.below(5);
        let expected: BTreeSet<BTreeSet<usize>> =
            closure_components(&pts, eps).into_iter().filter(|c| c.len() > m).collect();
        assert_eq!(as_sets(&build_subgraphs(&pts, eps, m)), expected);
    }
}

#[test]
fn kmeans_with_restarts_reaches_the_exhaustive_optimum() {
    let mut rng = Rng::new(99);
    let cfg = KMeansConfig { max_iters: 100, restarts: 10 };
    for _ in 0..300 {
        let n = 1 + rng.below(8);
        let k = 1 + rng.below(3.min(n));
        let pts = random_points(&mut rng, n, 2, 5.0);
        let r = kmeans(&pts, k, &cfg, &mut rng).unwrap();
        let opt = exhaustive_optimum(&pts, k);
        assert!(r.objective <= opt + 1e-9 * (1.0 + opt), "n={n} k={k}: {} vs {opt}", r.objective);
    }
}

#[test]
fn documented_subgraph_example() {
    let pts = Matrix::from_vec(4, 1, vec![0.0, 0.5, 1.0, 5.0]).unwrap();
    assert_eq!(build_subgraphs(&pts, 1.0, 2), vec![vec![0, 1, 2]]);
    // Raising eps merges, never splits.
    let low = connected_components(&pts, 0.2).len();
    let high = connected_components(&pts, 1.0).len();
    assert_eq!((low, high), (4, 2));
}

fn point_cloud() -> impl Strategy<Value = Matrix> {
    (1usize..60, 1usize..4).prop_flat_map(|(n, d)| {
        prop::collection::vec(-5.0f64..5.0, n * d).prop_map(move |v| Matrix::from_vec(n, d, v).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn component_count_non_increasing_in_eps(pts in point_cloud(), a in 0.01f64..3.0, b in 0.01f64..3.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let coarse = as_sets(&connected_components(&pts, hi));
        let fine = connected_components(&pts, lo);
        prop_assert!(coarse.len() <= fine.len());
        // Every fine component sits inside one coarse component.
        for f in &fine {
            prop_assert!(coarse.iter().any(|c| f.iter().all(|i| c.contains(i))));
        }
    }

    #[test]
    fn valid_cluster_count_non_increasing_in_m(pts in point_cloud(), eps in 0.01f64..3.0, m in 1usize..8) {
        let a = build_subgraphs(&pts, eps, m);
        let b = build_subgraphs(&pts, eps, m + 1);
        prop_assert!(b.len() <= a.len());
        prop_assert!(a.iter().all(|g| g.len() > m));
    }

    #[test]
    fn subgraphs_partition_a_subset(pts in point_cloud(), eps in 0.01f64..3.0, m in 1usize..5) {
        let groups = build_subgraphs(&pts, eps, m);
        let mut seen = BTreeSet::new();
        for g in &groups {
            for &i in g {
                prop_assert!(i < pts.rows());
                prop_assert!(seen.insert(i), "row {} in two groups", i);
            }
        }
    }

    #[test]
    fn kmeans_assignments_are_nearest_and_clusters_non_empty(pts in point_cloud(), k in 1usize..5, seed in 0u64..1000) {
        let k = k.min(pts.rows());
        let r = kmeans(&pts, k, &KMeansConfig::default(), &mut Rng::new(seed)).unwrap();
        let mut counts = vec![0; k];
        for (i, &a) in r.assignments.iter().enumerate() {
            counts[a] += 1;
            let d = sq_dist(pts.row(i), &r.centroids[a]);
            for c in &r.centroids {
                prop_assert!(d <= sq_dist(pts.row(i), c) + 1e-9);
            }
        }
        prop_assert!(counts.iter().all(|&c| c > 0));
    }
}
