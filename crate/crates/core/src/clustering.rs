//! Generic clustering primitives: Lloyd's K-means with k-means++ seeding and
//! reliability-path (epsilon-graph) connected components.

use petgraph::unionfind::UnionFind;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, sq_dist, Matrix};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { max_iters: 100, restarts: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Sum of squared distances to the assigned centroid.
    pub objective: f64,
}

fn assign(points: &Matrix, centroids: &[Vec<f64>], out: &mut [usize]) -> bool {
    let mut changed = false;
    for (i, p) in points.row_iter().enumerate() {
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (k, c) in centroids.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < bd {
                bd = d;
                best = k;
            }
        }
        if out[i] != best {
            out[i] = best;
            changed = true;
        }
    }
    changed
}

fn objective(points: &Matrix, centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points.row_iter().zip(assignments).map(|(p, &a)| sq_dist(p, &centroids[a])).sum()
}

fn plus_plus_seeds(points: &Matrix, k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = points.rows();
    let mut seeds = vec![points.row(rng.below(n)).to_vec()];
    let mut d2: Vec<f64> = points.row_iter().map(|p| sq_dist(p, &seeds[0])).collect();
    while seeds.len() < k {
        let pick = rng.weighted_index(&d2).unwrap_or_else(|| rng.below(n));
        let c = points.row(pick).to_vec();
        for (d, p) in d2.iter_mut().zip(points.row_iter()) {
            *d = d.min(sq_dist(p, &c));
        }
        seeds.push(c);
    }
    seeds
}

fn update_centroids(points: &Matrix, assignments: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let k = centroids.len();
    let mut sums = vec![vec![0.0; points.cols()]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.row_iter().zip(assignments) {
        axpy(1.0, p, &mut sums[a]);
        counts[a] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            centroids[c] = sums[c].iter().map(|s| s * inv).collect();
        }
    }
    counts
}

/// Moves the point farthest from its own centroid (taken from a cluster with at
/// least two members) into each empty cluster.
fn fill_empty(points: &Matrix, assignments: &mut [usize], centroids: &mut [Vec<f64>], counts: &mut [usize]) {
    for c in 0..centroids.len() {
        if counts[c] > 0 {
            continue;
        }
        let far = (0..points.rows()).filter(|&i| counts[assignments[i]] > 1).max_by(|&i, &j| {
            let di = sq_dist(points.row(i), &centroids[assignments[i]]);
            let dj = sq_dist(points.row(j), &centroids[assignments[j]]);
            di.total_cmp(&dj).then(j.cmp(&i))
        });
        if let Some(i) = far {
            counts[assignments[i]] -= 1;
            counts[c] = 1;
            assignments[i] = c;
            centroids[c] = points.row(i).to_vec();
        }
    }
}

/// Single-point moves that lower the objective (Hartigan's rule): moving `x`
/// from `a` to `b` changes it by `n_b/(n_b+1) |x-c_b|^2 - n_a/(n_a-1) |x-c_a|^2`.
/// A fixed point of these moves is also a fixed point of Lloyd's iteration.
/// Returns whether anything moved.
fn hartigan_moves(
    points: &Matrix,
    assignments: &mut [usize],
    centroids: &mut [Vec<f64>],
    counts: &mut [usize],
    max_passes: usize,
) -> bool {
    let mut moved_any = false;
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..points.rows() {
            let a = assignments[i];
            if counts[a] < 2 {
                continue;
            }
            let x = points.row(i);
            let na = counts[a] as f64;
            let remove = na / (na - 1.0) * sq_dist(x, &centroids[a]);
            let mut best = None;
            let mut best_add = remove;
            for b in (0..centroids.len()).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist(x, &centroids[b]);
                if add < best_add * (1.0 - 1e-12) {
                    best_add = add;
                    best = Some(b);
                }
            }
            if let Some(b) = best {
                let nb = counts[b] as f64;
                for (c, v) in centroids[a].iter_mut().zip(x) {
                    *c = (*c * na - v) / (na - 1.0);
                }
                for (c, v) in centroids[b].iter_mut().zip(x) {
                    *c = (*c * nb + v) / (nb + 1.0);
                }
                counts[a] -= 1;
                counts[b] += 1;
                assignments[i] = b;
                moved = true;
            }
        }
        moved_any |= moved;
        if !moved {
            break;
        }
    }
    moved_any
}

fn lloyd(points: &Matrix, mut centroids: Vec<Vec<f64>>, max_iters: usize) -> KMeansResult {
    let mut assignments = vec![usize::MAX; points.rows()];
    assign(points, &centroids, &mut assignments);
    for _ in 0..max_iters {
        let mut counts = update_centroids(points, &assignments, &mut centroids);
        fill_empty(points, &mut assignments, &mut centroids, &mut counts);
        if !assign(points, &centroids, &mut assignments) {
            break;
        }
    }
    // Coincident points can leave a cluster empty after the last assignment.
    let mut counts = update_centroids(points, &assignments, &mut centroids);
    if counts.contains(&0) {
        fill_empty(points, &mut assignments, &mut centroids, &mut counts);
        counts = update_centroids(points, &assignments, &mut centroids);
    }
    if hartigan_moves(points, &mut assignments, &mut centroids, &mut counts, max_iters) {
        update_centroids(points, &assignments, &mut centroids);
    }
    let obj = objective(points, &centroids, &assignments);
    KMeansResult { assignments, centroids, objective: obj }
}

/// Best of `cfg.restarts` k-means++ seeded Lloyd runs, each polished by
/// single-point moves, ranked by objective.
pub fn kmeans(points: &Matrix, k: usize, cfg: &KMeansConfig, rng: &mut Rng) -> Result<KMeansResult> {
    if k == 0 {
        return Err(Error::Validation("K must be at least 1".into()));
    }
    if k > points.rows() {
        return Err(Error::Validation(format!("K = {k} exceeds {} samples", points.rows())));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let seeds = plus_plus_seeds(points, k, rng);
        let run = lloyd(points, seeds, cfg.max_iters);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Connected components of the graph linking rows whose squared distance is at
/// most `eps`. Members are sorted; components are ordered by their first member.
pub fn connected_components(points: &Matrix, eps: f64) -> Vec<Vec<usize>> {
    let n = points.rows();
    let mut uf = UnionFind::<usize>::new(n);
    for i in 0..n {
        let pi = points.row(i);
        for j in (i + 1)..n {
            if sq_dist(pi, points.row(j)) <= eps {
                uf.union(i, j);
            }
        }
    }
    let labels = uf.into_labeling();
    let mut slot = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for i in 0..n {
        let root = labels[i];
        if slot[root] == usize::MAX {
            slot[root] = comps.len();
            comps.push(Vec::new());
        }
        comps[slot[root]].push(i);
    }
    comps
}

/// Components with strictly more than `min_size` members.
pub fn build_subgraphs(points: &Matrix, eps: f64, min_size: usize) -> Vec<Vec<usize>> {
    connected_components(points, eps).into_iter().filter(|c| c.len() > min_size).collect()
}
