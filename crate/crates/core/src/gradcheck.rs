//! Finite-difference check of the analytic loss gradients.
//!
//! A small encoder encodes one live batch; older window rows are constants, as
//! they are during training. Pseudo-labels and subtype memberships are computed
//! once at the unperturbed parameters and then frozen, so every loss term is a
//! smooth function of the parameters away from ReLU kinks.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::memory::{compute_memory, CentroidMemory, FeatureQueue, FeatureRecord, Window};
use crate::nn::{backward, forward_with_stat_rows, Activation, EncoderParams, EncoderSpec, Gradients, HeadDims};
use crate::rng::Rng;
use crate::subtype::{CentroidRule, ClusterConfig, ClusterMode};
use crate::synth::Domain;
use crate::trainer::{total_loss, window_terms, LossTerms, TermGradients};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub layer_dims: Vec<usize>,
    /// Optional batch-normalized head; its statistics come from the source rows.
    pub head: Option<HeadDims>,
    pub dropout: f64,
    pub batch_size: usize,
    /// Batches in the window, the live one included.
    pub window: usize,
    pub num_classes: usize,
    pub subtypes_per_class: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub eps: f64,
    pub step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            layer_dims: vec![8, 16, 16, 8],
            head: None,
            dropout: 0.0,
            batch_size: 32,
            window: 3,
            num_classes: 3,
            subtypes_per_class: 2,
            alpha: 0.7,
            beta: 1.3,
            tau: 16.0,
            eps: 1.0,
            step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TermCheck {
    pub term: &'static str,
    pub value: f64,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
    pub checked: usize,
    /// Coordinates whose difference quotient straddles a kink at every step size tried.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub num_params: usize,
    pub clusters: usize,
    pub mined_targets: usize,
    pub terms: Vec<TermCheck>,
}

impl GradCheckConfig {
    /// The plain two-hidden-layer encoder and a variant with the normalized head.
    pub fn suites() -> Vec<(&'static str, GradCheckConfig)> {
        let base = Self::default();
        let head = Self {
            layer_dims: vec![8, 16],
            head: Some(HeadDims { hidden: 16, output: 8 }),
            dropout: 0.25,
            ..Self::default()
        };
        vec![("mlp", base), ("head", head)]
    }
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

const DROPOUT_SEED: u64 = 17;

const TERMS: [&str; 4] = ["ce", "class", "sub", "total"];

struct Problem {
    x: Matrix,
    ns: usize,
    window: Window,
    memory: CentroidMemory,
    cfg: GradCheckConfig,
}

impl Problem {
    fn encode(&self, params: &EncoderParams) -> Result<(Matrix, crate::nn::ForwardCache)> {
        forward_with_stat_rows(params, &self.x, true, self.ns, &mut Rng::new(DROPOUT_SEED))
    }

    fn terms(&self, params: &EncoderParams) -> Result<(LossTerms, TermGradients, Matrix)> {
        let (f, _) = self.encode(params)?;
        let mut w = self.window.clone();
        for (i, &r) in self.window.live_source.iter().enumerate() {
            w.source.row_mut(r).copy_from_slice(f.row(i));
        }
        for (j, &r) in self.window.live_target.iter().enumerate() {
            w.target.row_mut(r).copy_from_slice(f.row(self.ns + j));
        }
        let (t, g) = window_terms(&w, &self.memory, self.cfg.num_classes, CentroidRule::Joint)?;
        Ok((t, g, f))
    }

    fn values(&self, params: &EncoderParams) -> Result<[f64; 4]> {
        let (t, _, _) = self.terms(params)?;
        Ok([t.ce, t.class, t.sub, total_loss(&t, self.cfg.alpha, self.cfg.beta)])
    }

    /// Per-row feature gradients of each term, restricted to the live batch.
    fn live_grads(&self, g: &TermGradients, dim: usize) -> [Matrix; 4] {
        let zt = Matrix::zeros(g.class_target.rows(), dim);
        let (ts, tt) = g.combine(self.cfg.alpha, self.cfg.beta);
        let pairs = [
            (&g.ce_source, &zt),
            (&g.class_source, &g.class_target),
            (&g.sub_source, &g.sub_target),
            (&ts, &tt),
        ];
        pairs.map(|(s, t)| {
            let mut out = Matrix::zeros(self.x.rows(), dim);
            for (i, &r) in self.window.live_source.iter().enumerate() {
                out.row_mut(i).copy_from_slice(s.row(r));
            }
            for (j, &r) in self.window.live_target.iter().enumerate() {
                out.row_mut(self.ns + j).copy_from_slice(t.row(r));
            }
            out
        })
    }
}

fn build(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<(EncoderParams, Problem)> {
    let mut spec = EncoderSpec::mlp(cfg.layer_dims.clone());
    spec.head = cfg.head;
    spec.dropout = cfg.dropout;
    spec.output_activation = Activation::Identity;
    let params = EncoderParams::new(spec, rng)?;
    let dim = params.feature_dim();
    let in_dim = params.input_dim();
    let n = cfg.num_classes;
    let k = cfg.subtypes_per_class;
    if cfg.batch_size < 2 || cfg.window == 0 || n == 0 || k == 0 {
        return Err(Error::Validation("gradcheck needs batch >= 2 and positive window, classes, subtypes".into()));
    }

    // Inputs around class/subtype means so the encoded window has structure.
    let means: Vec<Vec<f64>> = (0..n * k).map(|_| (0..in_dim).map(|_| 1.5 * rng.normal()).collect()).collect();
    let ns = cfg.batch_size.div_ceil(2);
    let draw = |rng: &mut Rng, label: usize| -> Vec<f64> {
        let m = &means[label * k + rng.below(k)];
        m.iter().map(|v| v + 0.4 * rng.normal()).collect()
    };

    let mut queue = FeatureQueue::new(cfg.window, cfg.batch_size, dim)?;
    let mut live_x = Matrix::zeros(0, 0);
    for stamp in 1..=cfg.window as u64 {
        let labels: Vec<usize> = (0..ns).map(|i| i % n).collect();
        let mut rows: Vec<Vec<f64>> = labels.iter().map(|&l| draw(rng, l)).collect();
        for _ in ns..cfg.batch_size {
            let l = rng.below(n);
            rows.push(draw(rng, l));
        }
        let x = Matrix::from_rows(&rows, in_dim)?;
        let (f, _) = forward_with_stat_rows(&params, &x, true, ns, &mut Rng::new(DROPOUT_SEED))?;
        let records = f
            .row_iter()
            .enumerate()
            .map(|(i, row)| FeatureRecord {
                sample_id: stamp * 1000 + i as u64,
                domain: if i < ns { Domain::Source } else { Domain::Target },
                feature: row.to_vec(),
                source_label: (i < ns).then(|| labels[i]),
                pseudo_class: None,
                stamp,
            })
            .collect();
        queue.enqueue_batch(records)?;
        live_x = x;
    }
    let window = queue.window();
    let cluster = ClusterConfig {
        mode: ClusterMode::KMeans,
        subtypes_per_class: vec![k; n],
        eps: cfg.eps,
        tau: Some(cfg.tau),
        ..ClusterConfig::default()
    };
    let memory = compute_memory(&window, n, Some(&cluster), rng)?;
    Ok((params, Problem { x: live_x, ns, window, memory, cfg: cfg.clone() }))
}

fn perturbed(params: &EncoderParams, layer: usize, idx: usize, delta: f64) -> EncoderParams {
    let mut p = params.clone();
    let d = &mut p.dense[layer];
    let nw = d.weight.as_slice().len();
    if idx < nw {
        d.weight.as_mut_slice()[idx] += delta;
    } else {
        d.bias[idx - nw] += delta;
    }
    p
}

fn central(problem: &Problem, params: &EncoderParams, layer: usize, idx: usize, h: f64) -> Result<[f64; 4]> {
    let plus = problem.values(&perturbed(params, layer, idx, h))?;
    let minus = problem.values(&perturbed(params, layer, idx, -h))?;
    Ok(std::array::from_fn(|t| (plus[t] - minus[t]) / (2.0 * h)))
}

fn agree(a: &[f64; 4], b: &[f64; 4]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9 || relative_error(*x, *y) < 1e-5)
}

/// Compares analytic and central-difference gradients of every loss term with
/// respect to every encoder parameter. A coordinate whose quotients at `h` and
/// `h / 4` disagree is treated as straddling a ReLU kink and retried at
/// `h / 100`; if it still disagrees it is counted as skipped.
pub fn gradcheck(cfg: &GradCheckConfig, rng: &mut Rng) -> Result<GradCheckReport> {
    let (params, problem) = build(cfg, rng)?;
    let (terms, grads, f) = problem.terms(&params)?;
    let (_, cache) = problem.encode(&params)?;
    let analytic: Vec<Gradients> = problem
        .live_grads(&grads, f.cols())
        .iter()
        .map(|g| backward(&params, &cache, g).map(|(pg, _)| pg))
        .collect::<Result<_>>()?;
    let values = [terms.ce, terms.class, terms.sub, total_loss(&terms, cfg.alpha, cfg.beta)];

    let mut checks: Vec<TermCheck> = TERMS
        .iter()
        .zip(values)
        .map(|(&term, value)| TermCheck { term, value, max_rel_error: 0.0, max_abs_grad: 0.0, checked: 0, skipped: 0 })
        .collect();
    let h = cfg.step;
    for layer in 0..params.dense.len() {
        let count = params.dense[layer].weight.as_slice().len() + params.dense[layer].bias.len();
        for idx in 0..count {
            let coarse = central(&problem, &params, layer, idx, h)?;
            let fine = central(&problem, &params, layer, idx, h / 4.0)?;
            let numeric = if agree(&coarse, &fine) {
                Some(coarse)
            } else {
                let a = central(&problem, &params, layer, idx, h / 100.0)?;
                let b = central(&problem, &params, layer, idx, h / 400.0)?;
                agree(&a, &b).then_some(a)
            };
            for (t, c) in checks.iter_mut().enumerate() {
                let g = &analytic[t].dense[layer];
                let nw = g.weight.as_slice().len();
                let a = if idx < nw { g.weight.as_slice()[idx] } else { g.bias[idx - nw] };
                c.max_abs_grad = c.max_abs_grad.max(a.abs());
                match numeric {
                    Some(n) => {
                        c.checked += 1;
                        c.max_rel_error = c.max_rel_error.max(relative_error(a, n[t]));
                    }
                    None => c.skipped += 1,
                }
            }
        }
    }
    Ok(GradCheckReport {
        num_params: params.num_params(),
        clusters: problem.memory.clusters.len(),
        mined_targets: problem.memory.clusters.iter().map(|c| c.m_t()).sum(),
        terms: checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_match_through_the_normalized_head() {
        let cfg = GradCheckConfig {
            layer_dims: vec![4, 6],
            head: Some(HeadDims { hidden: 5, output: 3 }),
            dropout: 0.3,
            batch_size: 12,
            ..Default::default()
        };
        let r = gradcheck(&cfg, &mut Rng::new(2)).unwrap();
        for t in &r.terms {
            assert!(t.max_rel_error < 1e-4, "{t:?}");
        }
    }

    #[test]
    fn gradients_match_on_a_small_encoder() {
        let cfg = GradCheckConfig { layer_dims: vec![4, 6, 3], batch_size: 12, ..Default::default() };
        let r = gradcheck(&cfg, &mut Rng::new(5)).unwrap();
        assert!(r.mined_targets > 0, "{r:?}");
        for t in &r.terms {
            assert!(t.max_abs_grad > 0.0, "{} has no gradient", t.term);
            assert!(t.max_rel_error < 1e-4, "{t:?}");
            assert!(t.skipped * 20 <= r.num_params, "{t:?}");
        }
    }
}
