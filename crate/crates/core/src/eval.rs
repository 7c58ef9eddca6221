//! Test-time prototype classification and the diagnostics around it: the
//! proxy A-distance between domains, consensus clustering stability and the
//! ablation grid.

use serde::{Deserialize, Serialize};

use crate::clustering::{kmeans, KMeansConfig};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{dot, nearest, Matrix};
use crate::nn::{forward, EncoderParams};
use crate::prototypes::{class_centroids, pseudo_label, ClassCentroids};
use crate::rng::Rng;
use crate::subtype::{discover_subtypes, CentroidRule, ClusterConfig};
use crate::synth::{Dataset, DomainShiftSpec, SourcePool, TargetPool};
use crate::trainer::{run, TrainConfig};

/// Which class centroids act as test prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrototypeVariant {
    /// `(c_s + c_t) / 2`.
    Joint,
    Source,
    Target,
}

impl PrototypeVariant {
    pub const ALL: [PrototypeVariant; 3] = [Self::Joint, Self::Source, Self::Target];
}

/// Encodes `x` in evaluation mode (no dropout).
pub fn encode(params: &EncoderParams, x: &Matrix) -> Result<Matrix> {
    Ok(forward(params, x, false, &mut Rng::new(0))?.0)
}

/// Class centroids of the encoded training pools; target centroids follow
/// the pseudo-labels.
pub fn fit_prototypes(params: &EncoderParams, source: &SourcePool, target: &TargetPool, num_classes: usize) -> Result<ClassCentroids> {
    let fs = encode(params, &source.x)?;
    let ft = encode(params, &target.x)?;
    let s = class_centroids(&fs, &source.labels, num_classes)?;
    let pseudo = pseudo_label(&ft, &s)?;
    let t = class_centroids(&ft, &pseudo, num_classes)?;
    Ok(ClassCentroids { source: s, target: t })
}

/// Prototype per class for `variant`; a missing centroid is a state error.
pub fn variant_centroids(c: &ClassCentroids, variant: PrototypeVariant) -> Result<Vec<Vec<f64>>> {
    let missing = |n: usize| Error::State(format!("class {n} has no {variant:?} centroid"));
    (0..c.source.num_classes())
        .map(|n| {
            let s = c.source.centroids[n].as_ref();
            let t = c.target.centroids[n].as_ref();
            match variant {
                PrototypeVariant::Source => s.cloned().ok_or_else(|| missing(n)),
                PrototypeVariant::Target => t.cloned().ok_or_else(|| missing(n)),
                PrototypeVariant::Joint => match (s, t) {
                    (Some(s), Some(t)) => Ok(s.iter().zip(t).map(|(a, b)| 0.5 * (a + b)).collect()),
                    _ => Err(missing(n)),
                },
            }
        })
        .collect()
}

/// Nearest-prototype prediction; ties go to the lowest class.
pub fn classify_test(features: &Matrix, prototypes: &[Vec<f64>]) -> Result<Vec<usize>> {
    if prototypes.is_empty() {
        return Err(Error::State("no prototypes".into()));
    }
    if prototypes.iter().any(|p| p.len() != features.cols()) {
        return Err(shape_err!("prototype width differs from feature width {}", features.cols()));
    }
    let opts: Vec<Option<&Vec<f64>>> = prototypes.iter().map(Some).collect();
    Ok(features.row_iter().map(|f| nearest(f, &opts).expect("non-empty")).collect())
}

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(shape_err!("{} predictions for {} labels", predictions.len(), truth.len()));
    }
    if truth.is_empty() {
        return Err(Error::Validation("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Accuracy within each class; `None` for classes absent from `truth`.
pub fn per_class_accuracy(predictions: &[usize], truth: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    (0..num_classes)
        .map(|n| {
            let (hit, all) = predictions
                .iter()
                .zip(truth)
                .filter(|(_, t)| **t == n)
                .fold((0usize, 0usize), |(h, a), (p, _)| (h + (*p == n) as usize, a + 1));
            (all > 0).then(|| hit as f64 / all as f64)
        })
        .collect()
}

/// Target test accuracy and source pool accuracy with `variant` prototypes,
/// falling back to source prototypes when the variant is incomplete.
pub fn run_accuracies(params: &EncoderParams, data: &Dataset, variant: PrototypeVariant) -> Result<(f64, f64)> {
    let c = fit_prototypes(params, &data.source, &data.target, data.num_classes)?;
    let protos = match variant_centroids(&c, variant) {
        Ok(p) => p,
        Err(_) => variant_centroids(&c, PrototypeVariant::Source)?,
    };
    let target_acc = accuracy(&classify_test(&encode(params, &data.test.x)?, &protos)?, &data.test.labels)?;
    let source_acc = accuracy(&classify_test(&encode(params, &data.source.x)?, &protos)?, &data.source.labels)?;
    Ok((target_acc, source_acc))
}

// ---------------------------------------------------------------------------
// Proxy A-distance

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub folds: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { folds: 5, iterations: 500, learning_rate: 1.0, l2: 1e-4 }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Full-batch gradient descent on the L2-regularized logistic loss.
fn fit_logistic(x: &Matrix, y: &[f64], cfg: &ProbeConfig) -> (Vec<f64>, f64) {
    let (n, d) = x.shape();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let inv = 1.0 / n as f64;
    for _ in 0..cfg.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (row, &t) in x.row_iter().zip(y) {
            let r = sigmoid(dot(row, &w) + b) - t;
            gb += r;
            gw.iter_mut().zip(row).for_each(|(g, v)| *g += r * v);
        }
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= cfg.learning_rate * (g * inv + cfg.l2 * *wi);
        }
        b -= cfg.learning_rate * gb * inv;
    }
    (w, b)
}

/// `2 (1 - 2 err)` where `err` is the cross-validated error of a linear
/// logistic probe separating the two sets, clamped to `[0, 2]`. Each fold is
/// centred on its training mean and scaled by the training RMS norm, so the
/// result does not depend on a joint translation, rotation or scaling.
pub fn proxy_a_distance(source: &Matrix, target: &Matrix, cfg: &ProbeConfig, rng: &mut Rng) -> Result<f64> {
    if source.rows() < 2 || target.rows() < 2 {
        return Err(Error::Validation("proxy A-distance needs at least two samples per domain".into()));
    }
    if source.cols() != target.cols() {
        return Err(shape_err!("feature widths {} and {}", source.cols(), target.cols()));
    }
    if cfg.folds < 2 {
        return Err(Error::Validation("need at least two folds".into()));
    }
    let all = source.vstack(target)?;
    let labels: Vec<f64> = (0..all.rows()).map(|i| if i < source.rows() { 0.0 } else { 1.0 }).collect();
    // Stratified folds; never more folds than the smaller domain has samples.
    let folds = cfg.folds.min(source.rows()).min(target.rows());
    let mut fold_of = vec![0usize; all.rows()];
    for range in [0..source.rows(), source.rows()..all.rows()] {
        let mut idx: Vec<usize> = range.collect();
        rng.shuffle(&mut idx);
        for (pos, i) in idx.into_iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    let mut errors = 0usize;
    for f in 0..folds {
        let train: Vec<usize> = (0..all.rows()).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..all.rows()).filter(|&i| fold_of[i] == f).collect();
        let mut xtr = all.select_rows(&train);
        let mean = xtr.col_means();
        let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
        xtr.add_row_broadcast(&neg)?;
        let rms = (xtr.as_slice().iter().map(|v| v * v).sum::<f64>() / xtr.rows() as f64).sqrt();
        let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
        xtr.scale(scale);
        let ytr: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
        let (w, b) = fit_logistic(&xtr, &ytr, cfg);
        for &i in &test {
            let z: f64 = all.row(i).iter().zip(&mean).zip(&w).map(|((v, m), wi)| (v - m) * scale * wi).sum::<f64>() + b;
            let pred = if z > 0.0 { 1.0 } else { 0.0 };
            if pred != labels[i] {
                errors += 1;
            }
        }
    }
    let err = errors as f64 / all.rows() as f64;
    Ok((2.0 * (1.0 - 2.0 * err)).clamp(0.0, 2.0))
}

// ---------------------------------------------------------------------------
// Consensus clustering

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusConfig {
    pub resamples: usize,
    pub subsample_frac: f64,
    pub kmeans: KMeansConfig,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self { resamples: 50, subsample_frac: 0.8, kmeans: KMeansConfig { max_iters: 100, restarts: 1 } }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSummary {
    pub k: usize,
    /// Area under the empirical CDF of the off-diagonal consensus entries.
    pub auc: f64,
    /// Relative AUC gain over `k - 1`; for the first `k >= 2` it is the AUC itself.
    pub delta_auc: f64,
    pub mean_consensus: f64,
    /// Share of entries strictly inside (0.1, 0.9).
    pub ambiguous_fraction: f64,
}

/// Row order that depends only on row contents.
fn canonical_order(points: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| {
        points
            .row(a)
            .iter()
            .zip(points.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order
}

/// Pairwise co-clustering frequency over K-means runs on random subsamples:
/// for each pair, the share of runs sampling both in which they share a
/// cluster. Pairs never sampled together get 0. The matrix is symmetric with a
/// unit diagonal; for `k = 1` every entry is 1.
pub fn consensus_matrix(points: &Matrix, k: usize, cfg: &ConsensusConfig, rng: &mut Rng) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Validation(format!("K = {k} outside 1..={n}")));
    }
    if !(cfg.subsample_frac > 0.0 && cfg.subsample_frac <= 1.0) {
        return Err(Error::Validation("subsample_frac must lie in (0, 1]".into()));
    }
    let mut out = Matrix::zeros(n, n);
    if k == 1 {
        out.map_inplace(|_| 1.0);
        return Ok(out);
    }
    let order = canonical_order(points);
    let sorted = points.select_rows(&order);
    let m = ((cfg.subsample_frac * n as f64).round() as usize).clamp(k, n);
    let mut together = Matrix::zeros(n, n);
    let mut sampled = Matrix::zeros(n, n);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.resamples {
        rng.shuffle(&mut idx);
        let mut sub = idx[..m].to_vec();
        sub.sort_unstable();
        let r = kmeans(&sorted.select_rows(&sub), k, &cfg.kmeans, rng)?;
        for a in 0..m {
            for b in (a + 1)..m {
                let (i, j) = (sub[a], sub[b]);
                sampled[(i, j)] += 1.0;
                if r.assignments[a] == r.assignments[b] {
                    together[(i, j)] += 1.0;
                }
            }
        }
    }
    for i in 0..n {
        out[(order[i], order[i])] = 1.0;
        for j in (i + 1)..n {
            let v = if sampled[(i, j)] > 0.0 { together[(i, j)] / sampled[(i, j)] } else { 0.0 };
            out[(order[i], order[j])] = v;
            out[(order[j], order[i])] = v;
        }
    }
    Ok(out)
}

fn upper_entries(c: &Matrix) -> Vec<f64> {
    let n = c.rows();
    let mut v = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            v.push(c[(i, j)]);
        }
    }
    v
}

/// `sum_{i>=2} (x_i - x_{i-1}) CDF(x_i)` over the sorted off-diagonal entries.
pub fn cdf_auc(consensus: &Matrix) -> f64 {
    let mut x = upper_entries(consensus);
    if x.len() < 2 {
        return 0.0;
    }
    x.sort_by(f64::total_cmp);
    let m = x.len() as f64;
    let mut auc = 0.0;
    let mut i = 1;
    while i < x.len() {
        // CDF at x_i counts every entry equal to it.
        let mut last = i;
        while last + 1 < x.len() && x[last + 1] == x[i] {
            last += 1;
        }
        auc += (x[i] - x[i - 1]) * (last + 1) as f64 / m;
        i = last + 1;
    }
    auc
}

/// Consensus summaries for every `k` in `k_range` (sorted ascending).
pub fn consensus_cdf_auc(points: &Matrix, k_range: &[usize], cfg: &ConsensusConfig, rng: &mut Rng) -> Result<Vec<ConsensusSummary>> {
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut out: Vec<ConsensusSummary> = Vec::with_capacity(ks.len());
    for k in ks {
        let c = consensus_matrix(points, k, cfg, rng)?;
        let entries = upper_entries(&c);
        let count = entries.len().max(1) as f64;
        let auc = cdf_auc(&c);
        let delta_auc = match out.last() {
            Some(prev) if prev.k + 1 == k && prev.auc > 0.0 => (auc - prev.auc) / prev.auc,
            _ => auc,
        };
        out.push(ConsensusSummary {
            k,
            auc,
            delta_auc,
            mean_consensus: entries.iter().sum::<f64>() / count,
            ambiguous_fraction: entries.iter().filter(|&&v| v > 0.1 && v < 0.9).count() as f64 / count,
        });
    }
    Ok(out)
}

/// The `k >= 2` with the largest AUC gain; ties go to the smaller `k`.
pub fn delta_auc_elbow(summaries: &[ConsensusSummary]) -> Option<usize> {
    summaries
        .iter()
        .filter(|s| s.k >= 2)
        .fold(None::<&ConsensusSummary>, |best, s| match best {
            Some(b) if b.delta_auc >= s.delta_auc => Some(b),
            _ => Some(s),
        })
        .map(|s| s.k)
}

// ---------------------------------------------------------------------------
// Full report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub probe: ProbeConfig,
    pub consensus: ConsensusConfig,
    /// Largest K in the per-class consensus curves; 0 skips them.
    pub consensus_k_max: usize,
    /// Per-class sample cap for the consensus analysis.
    pub consensus_samples: usize,
    pub cluster: Option<ClusterConfig>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            probe: ProbeConfig::default(),
            consensus: ConsensusConfig::default(),
            consensus_k_max: 6,
            consensus_samples: 150,
            cluster: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantAccuracy {
    pub variant: PrototypeVariant,
    /// `None` when some class lacks the variant's centroid.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConsensus {
    pub class_id: usize,
    pub curve: Vec<ConsensusSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: Vec<VariantAccuracy>,
    pub source_accuracy: f64,
    /// Target test accuracy per class with the joint prototypes (source
    /// prototypes when the joint ones are incomplete).
    pub per_class_accuracy: Vec<Option<f64>>,
    pub proxy_a_distance: f64,
    pub clusters_per_class: Vec<usize>,
    pub consensus: Vec<ClassConsensus>,
}

/// Evaluates trained parameters on `data`.
pub fn evaluate(params: &EncoderParams, data: &Dataset, opts: &EvalOptions, rng: &mut Rng) -> Result<EvalReport> {
    let n = data.num_classes;
    let fs = encode(params, &data.source.x)?;
    let ft = encode(params, &data.target.x)?;
    let ftest = encode(params, &data.test.x)?;
    let s = class_centroids(&fs, &data.source.labels, n)?;
    let pseudo = pseudo_label(&ft, &s)?;
    let t = class_centroids(&ft, &pseudo, n)?;
    let cc = ClassCentroids { source: s, target: t };

    let mut accuracy_rows = Vec::new();
    for v in PrototypeVariant::ALL {
        let acc = match variant_centroids(&cc, v) {
            Ok(p) => Some(accuracy(&classify_test(&ftest, &p)?, &data.test.labels)?),
            Err(_) => None,
        };
        accuracy_rows.push(VariantAccuracy { variant: v, accuracy: acc });
    }
    let protos = variant_centroids(&cc, PrototypeVariant::Joint).or_else(|_| variant_centroids(&cc, PrototypeVariant::Source))?;
    let test_pred = classify_test(&ftest, &protos)?;
    let source_accuracy = accuracy(&classify_test(&fs, &protos)?, &data.source.labels)?;

    let proxy = proxy_a_distance(&fs, &ft, &opts.probe, rng)?;

    let clusters_per_class = match &opts.cluster {
        Some(cfg) => {
            let clusters = discover_subtypes(&fs, &data.source.labels, &ft, &pseudo, n, cfg, rng)?;
            (0..n).map(|c| clusters.iter().filter(|k| k.class_id == c).count()).collect()
        }
        None => vec![0; n],
    };

    let mut consensus = Vec::new();
    if opts.consensus_k_max >= 2 {
        for class in 0..n {
            let mut rows: Vec<usize> = (0..fs.rows()).filter(|&i| data.source.labels[i] == class).collect();
            rows.truncate(opts.consensus_samples);
            if rows.len() < 2 {
                continue;
            }
            let k_max = opts.consensus_k_max.min(rows.len());
            let ks: Vec<usize> = (1..=k_max).collect();
            let curve = consensus_cdf_auc(&fs.select_rows(&rows), &ks, &opts.consensus, rng)?;
            consensus.push(ClassConsensus { class_id: class, curve });
        }
    }

    Ok(EvalReport {
        accuracy: accuracy_rows,
        source_accuracy,
        per_class_accuracy: per_class_accuracy(&test_pred, &data.test.labels, n),
        proxy_a_distance: proxy,
        clusters_per_class,
        consensus,
    })
}

// ---------------------------------------------------------------------------
// Ablations

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationVariant {
    Full,
    NoOmega,
    PooledCentroid,
    NoTau,
    SingleSubtype,
    SourceOnly,
    TpnStyle,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        Self::Full,
        Self::NoOmega,
        Self::PooledCentroid,
        Self::NoTau,
        Self::SingleSubtype,
        Self::SourceOnly,
        Self::TpnStyle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoOmega => "no-omega",
            Self::PooledCentroid => "pooled-centroid",
            Self::NoTau => "no-tau",
            Self::SingleSubtype => "single-subtype",
            Self::SourceOnly => "source-only",
            Self::TpnStyle => "tpn-style",
        }
    }

    /// `base` with this variant's change applied.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::NoOmega => c.cluster.balance_weights = false,
            Self::PooledCentroid => c.cluster.centroid_rule = CentroidRule::Pooled,
            Self::NoTau => c.cluster.tau = None,
            Self::SingleSubtype => {
                c.cluster.mode = crate::subtype::ClusterMode::KMeans;
                c.cluster.subtypes_per_class = vec![1; c.cluster.subtypes_per_class.len().max(1)];
            }
            Self::SourceOnly => {
                c.alpha = 0.0;
                c.beta = 0.0;
            }
            Self::TpnStyle => c.beta = 0.0,
        }
        c
    }
}

impl std::fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Lookup(format!("unknown ablation variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub mean: f64,
    pub sd: f64,
    pub accuracies: Vec<f64>,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Trains with `config` and returns the final target test accuracy under
/// `config.test_prototypes`.
pub fn final_accuracy(config: &TrainConfig, data: &Dataset) -> Result<f64> {
    let out = run(config, data)?;
    Ok(run_accuracies(&out.state.params, data, config.test_prototypes)?.0)
}

/// Runs each variant once per seed. The seed drives both data generation and
/// training.
pub fn ablation_suite(
    spec: &DomainShiftSpec,
    seeds: &[u64],
    base: &TrainConfig,
    variants: &[AblationVariant],
) -> Result<Vec<AblationRow>> {
    let data: Vec<Dataset> = seeds.iter().map(|&s| Dataset::generate(spec, s)).collect::<Result<_>>()?;
    variants
        .iter()
        .map(|&v| {
            let accuracies = seeds
                .iter()
                .zip(&data)
                .map(|(&seed, d)| final_accuracy(&TrainConfig { seed, ..v.apply(base) }, d))
                .collect::<Result<Vec<f64>>>()?;
            let (mean, sd) = mean_sd(&accuracies);
            Ok(AblationRow { variant: v, mean, sd, accuracies })
        })
        .collect()
}
