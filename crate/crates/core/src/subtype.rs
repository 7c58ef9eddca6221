//! Subtype discovery inside each class and the subtype compactness objective.
//!
//! Per class: cluster the window's source features (K-means with a known `K_n`,
//! or reliability-path sub-graphs), assign the class's pseudo-labelled targets to
//! the nearest source subtype, optionally keep only semi-hard targets, then form
//! joint centroids and weights.

use serde::{Deserialize, Serialize};

use crate::clustering::{self, KMeansConfig};
use crate::error::{Error, Result};
use crate::linalg::{axpy, mean_of_rows, sq_dist, Matrix};
use crate::prototypes::members_by_class;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMode {
    KMeans,
    Subgraph,
}

/// How the subtype centre is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidRule {
    /// `(mu_s + mu_t) / 2`, each domain counts equally.
    Joint,
    /// Mean over all source and target members together.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub mode: ClusterMode,
    /// `K_n` per class, used in K-means mode.
    pub subtypes_per_class: Vec<usize>,
    /// Reliability-path threshold on squared distance.
    pub eps: f64,
    /// Semi-hard margin on squared distance to `mu_s`; `None` accepts every assigned target.
    pub tau: Option<f64>,
    /// Sub-graphs need strictly more than this many nodes.
    pub min_size: usize,
    pub kmeans: KMeansConfig,
    pub centroid_rule: CentroidRule,
    /// Scale each subtype by `1/sqrt(M_s + M_t)` (normalized to mean 1 per class).
    pub balance_weights: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            mode: ClusterMode::KMeans,
            subtypes_per_class: Vec::new(),
            eps: 1.0,
            tau: Some(1.0),
            min_size: 5,
            kmeans: KMeansConfig::default(),
            centroid_rule: CentroidRule::Joint,
            balance_weights: true,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Validation("eps must be positive".into()));
        }
        if let Some(t) = self.tau {
            if !(t > 0.0) {
                return Err(Error::Validation("tau must be positive".into()));
            }
        }
        if self.min_size < 1 {
            return Err(Error::Validation("min_size must be at least 1".into()));
        }
        if self.mode == ClusterMode::KMeans {
            if self.subtypes_per_class.len() != num_classes {
                return Err(Error::Validation(format!(
                    "K-means mode needs K_n for each of {num_classes} classes"
                )));
            }
            if self.subtypes_per_class.contains(&0) {
                return Err(Error::Validation("K_n must be at least 1".into()));
            }
        }
        Ok(())
    }
}

/// One discovered subtype. Members are row indices into the window's source and
/// target feature matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SubtypeCluster {
    pub class_id: usize,
    pub source_members: Vec<usize>,
    pub target_members: Vec<usize>,
    pub mu_s: Vec<f64>,
    pub mu_t: Option<Vec<f64>>,
    pub mu_st: Vec<f64>,
    pub weight: f64,
}

impl SubtypeCluster {
    pub fn m_s(&self) -> usize {
        self.source_members.len()
    }

    pub fn m_t(&self) -> usize {
        self.target_members.len()
    }
}

/// Source-side clusters of one class before target mining.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoCluster {
    pub class_id: usize,
    pub source_members: Vec<usize>,
    pub target_members: Vec<usize>,
}

/// Index of the nearest source subtype centroid per target row (ties to the lowest).
pub fn assign_target_subtypes(targets: &Matrix, source_centroids: &[Vec<f64>]) -> Vec<usize> {
    if source_centroids.is_empty() {
        return Vec::new();
    }
    targets
        .row_iter()
        .map(|f| {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (k, c) in source_centroids.iter().enumerate() {
                let d = sq_dist(f, c);
                if d < bd {
                    bd = d;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Semi-hard mining for one subtype. Accepts rows within squared distance `tau`
/// of `mu_s`, then grows the set along reliability paths (squared distance at
/// most `eps` to an accepted row) among the same rows. Returns sorted row indices.
pub fn semi_hard_filter(assigned: &Matrix, mu_s: &[f64], tau: f64, eps: f64) -> Vec<usize> {
    let n = assigned.rows();
    let mut accepted = vec![false; n];
    let mut frontier: Vec<usize> = Vec::new();
    for i in 0..n {
        if sq_dist(assigned.row(i), mu_s) <= tau {
            accepted[i] = true;
            frontier.push(i);
        }
    }
    while let Some(a) = frontier.pop() {
        let fa = assigned.row(a);
        for j in 0..n {
            if !accepted[j] && sq_dist(fa, assigned.row(j)) <= eps {
                accepted[j] = true;
                frontier.push(j);
            }
        }
    }
    (0..n).filter(|&i| accepted[i]).collect()
}

/// Centre of a subtype under `rule`, with the empty-target fallback `mu_st = mu_s`.
pub fn subtype_center(
    source: &Matrix,
    target: &Matrix,
    source_members: &[usize],
    target_members: &[usize],
    rule: CentroidRule,
) -> (Vec<f64>, Option<Vec<f64>>, Vec<f64>) {
    let mu_s = mean_of_rows(source, source_members).expect("cluster has source members");
    let mu_t = mean_of_rows(target, target_members);
    let mu_st = match (&mu_t, rule) {
        (None, _) => mu_s.clone(),
        (Some(t), CentroidRule::Joint) => mu_s.iter().zip(t).map(|(a, b)| 0.5 * (a + b)).collect(),
        (Some(_), CentroidRule::Pooled) => {
            let ms = source_members.len() as f64;
            let mt = target_members.len() as f64;
            let t = mu_t.as_ref().unwrap();
            mu_s.iter().zip(t).map(|(a, b)| (ms * a + mt * b) / (ms + mt)).collect()
        }
    };
    (mu_s, mu_t, mu_st)
}

/// Computes centres and balance weights. Raw weights `1/sqrt(M_s + M_t)` are
/// rescaled so their mean within each class is one.
pub fn finalize_clusters(
    protos: Vec<ProtoCluster>,
    source: &Matrix,
    target: &Matrix,
    rule: CentroidRule,
    balance_weights: bool,
) -> Vec<SubtypeCluster> {
    let mut clusters: Vec<SubtypeCluster> = protos
        .into_iter()
        .filter(|p| !p.source_members.is_empty())
        .map(|p| {
            let (mu_s, mu_t, mu_st) = subtype_center(source, target, &p.source_members, &p.target_members, rule);
            let raw = 1.0 / ((p.source_members.len() + p.target_members.len()) as f64).sqrt();
            SubtypeCluster {
                class_id: p.class_id,
                source_members: p.source_members,
                target_members: p.target_members,
                mu_s,
                mu_t,
                mu_st,
                weight: if balance_weights { raw } else { 1.0 },
            }
        })
        .collect();
    if balance_weights {
        let max_class = clusters.iter().map(|c| c.class_id + 1).max().unwrap_or(0);
        for class in 0..max_class {
            let (sum, count) = clusters
                .iter()
                .filter(|c| c.class_id == class)
                .fold((0.0, 0usize), |(s, n), c| (s + c.weight, n + 1));
            if count > 0 {
                let scale = count as f64 / sum;
                clusters.iter_mut().filter(|c| c.class_id == class).for_each(|c| c.weight *= scale);
            }
        }
    }
    clusters
}

/// Source subtypes of one class as local row indices.
pub fn source_subtypes(
    features: &Matrix,
    k: usize,
    cfg: &ClusterConfig,
    rng: &mut Rng,
) -> Result<Vec<Vec<usize>>> {
    if features.rows() == 0 {
        return Ok(Vec::new());
    }
    Ok(match cfg.mode {
        ClusterMode::KMeans => {
            let k = k.min(features.rows());
            let r = clustering::kmeans(features, k, &cfg.kmeans, rng)?;
            let mut groups = vec![Vec::new(); k];
            for (i, &a) in r.assignments.iter().enumerate() {
                groups[a].push(i);
            }
            groups.retain(|g| !g.is_empty());
            groups
        }
        ClusterMode::Subgraph => clustering::build_subgraphs(features, cfg.eps, cfg.min_size),
    })
}

/// Full per-class discovery over a window. Row indices in the result refer to
/// `source` / `target`.
pub fn discover_subtypes(
    source: &Matrix,
    source_labels: &[usize],
    target: &Matrix,
    target_pseudo: &[usize],
    num_classes: usize,
    cfg: &ClusterConfig,
    rng: &mut Rng,
) -> Result<Vec<SubtypeCluster>> {
    cfg.validate(num_classes)?;
    let sm = members_by_class(source_labels, num_classes);
    let tm = members_by_class(target_pseudo, num_classes);
    let mut protos = Vec::new();
    for class in 0..num_classes {
        let sf = source.select_rows(&sm[class]);
        let k = cfg.subtypes_per_class.get(class).copied().unwrap_or(1);
        let groups = source_subtypes(&sf, k, cfg, rng)?;
        if groups.is_empty() {
            continue;
        }
        let centroids: Vec<Vec<f64>> =
            groups.iter().map(|g| mean_of_rows(&sf, g).expect("non-empty group")).collect();
        let tf = target.select_rows(&tm[class]);
        let assignment = assign_target_subtypes(&tf, &centroids);
        for (k, g) in groups.iter().enumerate() {
            let local: Vec<usize> = (0..assignment.len()).filter(|&i| assignment[i] == k).collect();
            let accepted = match cfg.tau {
                Some(tau) => {
                    let sub = tf.select_rows(&local);
                    semi_hard_filter(&sub, &centroids[k], tau, cfg.eps).into_iter().map(|i| local[i]).collect()
                }
                None => local,
            };
            protos.push(ProtoCluster {
                class_id: class,
                source_members: g.iter().map(|&i| sm[class][i]).collect(),
                target_members: accepted.iter().map(|&i| tm[class][i]).collect(),
            });
        }
    }
    Ok(finalize_clusters(protos, source, target, cfg.centroid_rule, cfg.balance_weights))
}

/// Weighted subtype compactness `L_sub`: per cluster the mean squared distance of
/// source members to the centre plus that of target members (omitted when there
/// are none), scaled by the cluster weight, averaged over the class's clusters and
/// then over classes having at least one cluster. Gradients flow through the
/// members and through the centre.
pub fn subtype_compactness_loss(
    clusters: &[SubtypeCluster],
    source: &Matrix,
    target: &Matrix,
    rule: CentroidRule,
) -> (f64, Matrix, Matrix) {
    let dim = source.cols();
    let mut gs = Matrix::zeros(source.rows(), dim);
    let mut gt = Matrix::zeros(target.rows(), dim);
    let max_class = clusters.iter().map(|c| c.class_id + 1).max().unwrap_or(0);
    let mut per_class = vec![0usize; max_class];
    for c in clusters {
        per_class[c.class_id] += 1;
    }
    let active = per_class.iter().filter(|&&k| k > 0).count();
    if active == 0 {
        return (0.0, gs, gt);
    }
    let mut value = 0.0;
    for c in clusters {
        let scale = c.weight / (per_class[c.class_id] as f64 * active as f64);
        let (_, mu_t, center) = subtype_center(source, target, &c.source_members, &c.target_members, rule);
        let mut g_center = vec![0.0; dim];
        let mut term = |rows: &[usize], m: &Matrix, g: &mut Matrix| {
            let inv = 1.0 / rows.len() as f64;
            for &i in rows {
                let f = m.row(i);
                value += scale * inv * sq_dist(f, &center);
                let gi = g.row_mut(i);
                for j in 0..dim {
                    let d = scale * inv * 2.0 * (f[j] - center[j]);
                    gi[j] += d;
                    g_center[j] -= d;
                }
            }
        };
        term(&c.source_members, source, &mut gs);
        if mu_t.is_some() {
            term(&c.target_members, target, &mut gt);
        }
        let ms = c.source_members.len() as f64;
        let mt = c.target_members.len() as f64;
        let (ws, wt) = match (mu_t.is_some(), rule) {
            (false, _) => (1.0 / ms, 0.0),
            (true, CentroidRule::Joint) => (0.5 / ms, 0.5 / mt),
            (true, CentroidRule::Pooled) => (1.0 / (ms + mt), 1.0 / (ms + mt)),
        };
        for &i in &c.source_members {
            axpy(ws, &g_center, gs.row_mut(i));
        }
        if wt > 0.0 {
            for &i in &c.target_members {
                axpy(wt, &g_center, gt.row_mut(i));
            }
        }
    }
    (value, gs, gt)
}
