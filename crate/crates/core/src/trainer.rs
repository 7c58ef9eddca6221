//! Training loop: batch sampling, loss assembly over the feature queue, the
//! optimizer step, momentum refresh of the stored batch and memory upkeep.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, PrototypeVariant};
use crate::linalg::Matrix;
use crate::memory::{compute_memory, rebuild_centroids, CentroidMemory, FeatureQueue, FeatureRecord, Window};
use crate::nn::{backward, forward_with_stat_rows, EncoderParams, EncoderSpec, HeadDims, Standardizer};
use crate::optim::{AdamConfig, OptimizerState};
use crate::prototypes::{class_ce_loss, class_match_loss};
use crate::rng::Rng;
use crate::subtype::{subtype_compactness_loss, CentroidRule, ClusterConfig};
use crate::synth::{Dataset, Domain, SourcePool, TargetPool};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the class matching term.
    pub alpha: f64,
    /// Weight of the subtype compactness term.
    pub beta: f64,
    /// Momentum weight of the refreshed features.
    pub lambda: f64,
    /// Queue capacity in batches. Clustering starts once the queue is full.
    pub window: usize,
    /// Samples per iteration, split as evenly as possible with the extra one on
    /// the source side.
    pub batch_size: usize,
    pub cluster: ClusterConfig,
    pub learning_rate: f64,
    pub total_iterations: usize,
    pub seed: u64,
    /// Metrics are recorded at every multiple of this; 0 disables them.
    pub eval_every: usize,
    pub encoder: EncoderSpec,
    /// Prototypes used for the accuracies in the metrics timeline.
    pub test_prototypes: PrototypeVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            lambda: 0.5,
            window: 5,
            batch_size: 64,
            cluster: ClusterConfig::default(),
            learning_rate: 1e-3,
            total_iterations: 2000,
            seed: 0,
            eval_every: 100,
            encoder: default_encoder(64),
            test_prototypes: PrototypeVariant::Joint,
        }
    }
}

/// The encoder used by default for `input_dim`-dimensional data.
pub fn default_encoder(input_dim: usize) -> EncoderSpec {
    EncoderSpec {
        head: Some(HeadDims { hidden: 64, output: 32 }),
        dropout: 0.5,
        ..EncoderSpec::mlp(vec![input_dim, 128])
    }
}

impl TrainConfig {
    /// Defaults for data of `input_dim` with known subtype counts.
    pub fn for_data(input_dim: usize, subtypes_per_class: Vec<usize>) -> Self {
        let mut c = Self { encoder: default_encoder(input_dim), ..Self::default() };
        c.cluster.subtypes_per_class = subtypes_per_class;
        c
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation("alpha and beta must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Validation(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        if self.window == 0 || self.batch_size == 0 {
            return Err(Error::Validation("window and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if num_classes == 0 {
            return Err(Error::Validation("need at least one class".into()));
        }
        self.encoder.validate()?;
        if self.beta > 0.0 {
            self.cluster.validate(num_classes)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    fn source_per_batch(&self) -> usize {
        self.batch_size.div_ceil(2)
    }

    fn clustering_active(&self, iteration: u64) -> bool {
        self.beta > 0.0 && iteration >= self.window as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub class: f64,
    pub sub: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        self.ce.is_finite() && self.class.is_finite() && self.sub.is_finite()
    }
}

/// `ce + alpha * class + beta * sub`; the class and subtype terms already carry
/// their per-class averaging.
pub fn total_loss(terms: &LossTerms, alpha: f64, beta: f64) -> f64 {
    terms.ce + alpha * terms.class + beta * terms.sub
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub terms: LossTerms,
    pub total: f64,
    pub clusters: usize,
}

/// Each term's gradient over the window rows.
#[derive(Debug, Clone)]
pub struct TermGradients {
    pub ce_source: Matrix,
    pub class_source: Matrix,
    pub class_target: Matrix,
    pub sub_source: Matrix,
    pub sub_target: Matrix,
}

impl TermGradients {
    /// Gradients of the weighted total, `(source, target)`.
    pub fn combine(&self, alpha: f64, beta: f64) -> (Matrix, Matrix) {
        let mut gs = self.ce_source.clone();
        let mut gt = Matrix::zeros(self.class_target.rows(), self.class_target.cols());
        for (g, c, s) in [(&mut gs, &self.class_source, &self.sub_source), (&mut gt, &self.class_target, &self.sub_target)] {
            for ((v, a), b) in g.as_mut_slice().iter_mut().zip(c.as_slice()).zip(s.as_slice()) {
                *v += alpha * a + beta * b;
            }
        }
        (gs, gt)
    }
}

/// Evaluates the three loss terms on a window with the discrete structure
/// (pseudo-labels, subtype memberships) taken from `memory`. Cross-entropy is
/// averaged over the live source rows.
pub fn window_terms(
    window: &Window,
    memory: &CentroidMemory,
    num_classes: usize,
    rule: CentroidRule,
) -> Result<(LossTerms, TermGradients)> {
    let ce = class_ce_loss(&window.source, &window.source_labels, &window.live_source, num_classes)?;
    let (class, class_source, class_target) = class_match_loss(
        &window.source,
        &window.source_labels,
        &window.target,
        &memory.target_pseudo,
        num_classes,
    )?;
    let (sub, sub_source, sub_target) = subtype_compactness_loss(&memory.clusters, &window.source, &window.target, rule);
    Ok((
        LossTerms { ce: ce.value, class, sub },
        TermGradients { ce_source: ce.grad, class_source, class_target, sub_source, sub_target },
    ))
}

/// Running head statistics over the last few batches; they feed the frozen
/// standardizer between the head's first layer and its activation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HeadStats {
    batches: VecDeque<(f64, Vec<f64>, Vec<f64>)>,
}

impl HeadStats {
    const VAR_EPS: f64 = 1e-5;

    fn push(&mut self, pre: &Matrix, keep: usize) {
        let n = pre.rows() as f64;
        let mean = pre.col_means();
        let mut sq = vec![0.0; pre.cols()];
        for r in pre.row_iter() {
            sq.iter_mut().zip(r).for_each(|(s, v)| *s += v * v / n);
        }
        self.batches.push_back((n, mean, sq));
        while self.batches.len() > keep {
            self.batches.pop_front();
        }
    }

    fn standardizer(&self) -> Option<Standardizer> {
        let dim = self.batches.front()?.1.len();
        let total: f64 = self.batches.iter().map(|b| b.0).sum();
        let mut mean = vec![0.0; dim];
        let mut sq = vec![0.0; dim];
        for (n, m, s) in &self.batches {
            let w = n / total;
            mean.iter_mut().zip(m).for_each(|(a, b)| *a += w * b);
            sq.iter_mut().zip(s).for_each(|(a, b)| *a += w * b);
        }
        let std = mean.iter().zip(&sq).map(|(m, s)| ((s - m * m).max(0.0) + Self::VAR_EPS).sqrt()).collect();
        Some(Standardizer { mean, std })
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    pub queue: FeatureQueue,
    pub memory: Option<CentroidMemory>,
    pub iteration: u64,
    pub rng: Rng,
    pub history: Vec<LossReport>,
    pub head_stats: HeadStats,
    num_classes: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig, num_classes: usize) -> Result<Self> {
        config.validate(num_classes)?;
        let params = EncoderParams::new(config.encoder.clone(), &mut Rng::substream(config.seed, 10))?;
        let optimizer =
            OptimizerState::new(AdamConfig { learning_rate: config.learning_rate, ..AdamConfig::default() }, &params);
        let queue = FeatureQueue::new(config.window, config.batch_size, params.feature_dim())?;
        Ok(Self {
            params,
            optimizer,
            queue,
            memory: None,
            iteration: 0,
            rng: Rng::substream(config.seed, 11),
            history: Vec::new(),
            head_stats: HeadStats::default(),
            num_classes,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
}

fn check_pools(source: &SourcePool, target: &TargetPool, input_dim: usize, num_classes: usize) -> Result<()> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Validation("training pools must be non-empty".into()));
    }
    if source.x.cols() != input_dim || target.x.cols() != input_dim {
        return Err(Error::Validation(format!(
            "pools have {} / {} input columns, encoder expects {input_dim}",
            source.x.cols(),
            target.x.cols()
        )));
    }
    if source.labels.iter().any(|&l| l >= num_classes) {
        return Err(Error::Validation("source label out of range".into()));
    }
    Ok(())
}

/// One training iteration.
pub fn train_iteration(
    state: &mut TrainState,
    config: &TrainConfig,
    source: &SourcePool,
    target: &TargetPool,
) -> Result<LossReport> {
    let n = state.num_classes;
    check_pools(source, target, state.params.input_dim(), n)?;
    let ns = config.source_per_batch();
    let nt = config.batch_size - ns;

    // Sample the batch, uniform with replacement per pool.
    let s_idx: Vec<usize> = (0..ns).map(|_| state.rng.below(source.len())).collect();
    let t_idx: Vec<usize> = (0..nt).map(|_| state.rng.below(target.len())).collect();
    let x = source.x.select_rows(&s_idx).vstack(&target.x.select_rows(&t_idx))?;

    // Encode; the dropout generator is kept so the re-encode sees the same masks.
    // Normalization statistics come from the source rows, so target data reach
    // the parameters only through the adaptation terms.
    let dropout_rng = state.rng.split();
    let (features, cache) = forward_with_stat_rows(&state.params, &x, true, ns, &mut dropout_rng.clone())?;

    let stamp = state.iteration + 1;
    let records = s_idx
        .iter()
        .map(|&i| (source.ids[i], Domain::Source, Some(source.labels[i])))
        .chain(t_idx.iter().map(|&i| (target.ids[i], Domain::Target, None)))
        .zip(features.row_iter())
        .map(|((sample_id, domain, source_label), f)| FeatureRecord {
            sample_id,
            domain,
            feature: f.to_vec(),
            source_label,
            pseudo_class: None,
            stamp,
        })
        .collect();
    state.queue.enqueue_batch(records)?;

    // Window centroids, pseudo-labels and (after warm-up) subtypes.
    let window = state.queue.window();
    let cluster = config.clustering_active(state.iteration).then_some(&config.cluster);
    let memory = compute_memory(&window, n, cluster, &mut state.rng)?;
    let (terms, grads) = window_terms(&window, &memory, n, config.cluster.centroid_rule)?;
    let total = total_loss(&terms, config.alpha, config.beta);
    if !terms.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite(format!(
            "iteration {stamp}: ce={} class={} sub={} total={total}; clusters={}; parameter version {}",
            terms.ce,
            terms.class,
            terms.sub,
            memory.clusters.len(),
            state.params.version()
        )));
    }

    // Only the rows of the current batch depend on the parameters.
    let (gs, gt) = grads.combine(config.alpha, config.beta);
    let mut g = Matrix::zeros(x.rows(), features.cols());
    for (i, &r) in window.live_source.iter().enumerate() {
        g.row_mut(i).copy_from_slice(gs.row(r));
    }
    for (j, &r) in window.live_target.iter().enumerate() {
        g.row_mut(ns + j).copy_from_slice(gt.row(r));
    }
    let (param_grads, _) = backward(&state.params, &cache, &g)?;
    state.optimizer.step(&mut state.params, &param_grads)?;

    // Re-encode with the updated weights and blend into the stored batch.
    let (refreshed, _) = forward_with_stat_rows(&state.params, &x, true, ns, &mut dropout_rng.clone())?;
    state.queue.refresh_latest(&refreshed, config.lambda)?;

    // Running statistics for eval mode, again from the source rows.
    if let Some(pre) = cache.head_preactivations() {
        let rows: Vec<usize> = (0..ns).collect();
        state.head_stats.push(&pre.select_rows(&rows), config.window);
        if let Some(s) = state.head_stats.standardizer() {
            state.params.set_standardizer(s)?;
        }
    }

    let rebuilt = rebuild_centroids(&state.queue, n, cluster, state.memory.as_ref(), &mut state.rng)?;
    state.queue.set_pseudo_labels(&rebuilt.target_pseudo)?;
    state.memory = Some(rebuilt);
    state.iteration = stamp;

    let report = LossReport { iteration: stamp, terms, total, clusters: memory.clusters.len() };
    state.history.push(report);
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss_ce: f64,
    pub loss_class: f64,
    pub loss_sub: f64,
    pub loss_total: f64,
    pub target_acc: f64,
    pub source_acc: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub state: TrainState,
    pub metrics: Vec<MetricsRow>,
}

/// Trains for `config.total_iterations` on `data`, recording metrics every
/// `config.eval_every` iterations.
pub fn run(config: &TrainConfig, data: &Dataset) -> Result<RunOutput> {
    let mut state = TrainState::new(config, data.num_classes)?;
    check_pools(&data.source, &data.target, state.params.input_dim(), data.num_classes)?;
    let mut metrics = Vec::new();
    for _ in 0..config.total_iterations {
        let r = train_iteration(&mut state, config, &data.source, &data.target)?;
        if config.eval_every > 0 && r.iteration % config.eval_every as u64 == 0 {
            let (target_acc, source_acc) = eval::run_accuracies(&state.params, data, config.test_prototypes)?;
            metrics.push(MetricsRow {
                iteration: r.iteration,
                loss_ce: r.terms.ce,
                loss_class: r.terms.class,
                loss_sub: r.terms.sub,
                loss_total: r.total,
                target_acc,
                source_acc,
            });
        }
    }
    Ok(RunOutput { state, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::preset;

    fn small_config(iters: usize) -> (TrainConfig, Dataset) {
        let spec = preset("subtype-condshift").unwrap();
        let data = Dataset::generate(&spec, 1).unwrap();
        let mut c = TrainConfig::for_data(spec.input_dim, spec.subtypes_per_class.clone());
        c.total_iterations = iters;
        c.batch_size = 16;
        c.window = 3;
        c.eval_every = 4;
        (c, data)
    }

    #[test]
    fn total_loss_is_linear_in_beta() {
        let t = LossTerms { ce: 1.0, class: 2.0, sub: 3.0 };
        assert_eq!(total_loss(&t, 1.0, 0.0), 3.0);
        assert_eq!(total_loss(&t, 1.0, 1.0), 6.0);
        assert_eq!(total_loss(&t, 1.0, 2.0) - 3.0, 2.0 * (total_loss(&t, 1.0, 1.0) - 3.0));
        assert_eq!(total_loss(&LossTerms::default(), 1.0, 1.0), 0.0);
    }

    #[test]
    fn queue_fills_to_window() {
        let (c, data) = small_config(5);
        let mut s = TrainState::new(&c, data.num_classes).unwrap();
        train_iteration(&mut s, &c, &data.source, &data.target).unwrap();
        assert_eq!(s.queue.len(), 1);
        for _ in 0..4 {
            train_iteration(&mut s, &c, &data.source, &data.target).unwrap();
        }
        assert_eq!(s.queue.len(), 3);
        assert_eq!(s.iteration, 5);
    }

    #[test]
    fn zero_iterations_produce_no_metrics() {
        let (c, data) = small_config(0);
        let out = run(&c, &data).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.state.iteration, 0);
    }

    #[test]
    fn runs_are_deterministic_and_reports_consistent() {
        let (c, data) = small_config(8);
        let a = run(&c, &data).unwrap();
        let b = run(&c, &data).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.state.history, b.state.history);
        assert_eq!(a.metrics.len(), 2);
        for r in &a.state.history {
            assert!((r.total - total_loss(&r.terms, c.alpha, c.beta)).abs() <= 1e-9);
        }
        // Subtype clustering kicks in after the warm-up.
        assert!(a.state.history[..3].iter().all(|r| r.clusters == 0 && r.terms.sub == 0.0));
        assert!(a.state.history[3..].iter().all(|r| r.clusters > 0));
    }

    #[test]
    fn beta_zero_skips_subtypes() {
        let (mut c, data) = small_config(6);
        c.beta = 0.0;
        let out = run(&c, &data).unwrap();
        for r in &out.state.history {
            assert_eq!(r.terms.sub, 0.0);
            assert_eq!(r.total, r.terms.ce + c.alpha * r.terms.class);
        }
    }

    #[test]
    fn config_json_round_trip() {
        let (c, _) = small_config(3);
        assert_eq!(TrainConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        assert!(TrainConfig::from_json("{\"alpha\": 1, \"bogus\": 2}").is_err());
    }

    #[test]
    fn nested_config_fields_default() {
        let c = TrainConfig::from_json(r#"{"cluster": {"subtypes_per_class": [2, 3], "tau": null}}"#).unwrap();
        assert_eq!(c.cluster.subtypes_per_class, vec![2, 3]);
        assert_eq!(c.cluster.tau, None);
        assert_eq!(c.cluster.eps, ClusterConfig::default().eps);
        assert!(TrainConfig::from_json(r#"{"cluster": {"bogus": 1}}"#).is_err());
    }
}
