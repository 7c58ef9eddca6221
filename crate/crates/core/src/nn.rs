//! Feed-forward encoder with hand-derived gradients.
//!
//! The body is a stack of fully connected layers with ReLU. The optional
//! dimension-reduction head is `fc -> standardize -> relu -> dropout -> fc -> relu`,
//! where `standardize` applies frozen per-feature statistics (mean, std) that the
//! trainer refreshes from the queue window. The statistics are constants inside a
//! forward/backward pair, so the head stays exactly differentiable.
//!
//! Dropout uses the inverted convention: kept units are scaled by `1/(1-p)` in
//! train mode and evaluation is the identity.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

/// Fully connected layer, `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { weight: Matrix::zeros(output, input), bias: vec![0.0; output] }
    }

    /// He-uniform initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / input.max(1) as f64).sqrt();
        let mut d = Self::zeros(input, output);
        for w in d.weight.as_mut_slice() {
            *w = rng.uniform_range(-bound, bound);
        }
        d
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut z = x.matmul_t(&self.weight)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }

    fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }
}

/// Running statistics of the head's batch normalization, used in eval mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadDims {
    pub hidden: usize,
    pub output: usize,
}

/// Architecture description; everything needed to allocate parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    /// Input dim, hidden dims..., body output dim.
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub head: Option<HeadDims>,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default)]
    pub output_activation: Activation,
}

fn default_dropout() -> f64 {
    0.5
}

impl EncoderSpec {
    pub fn mlp(layer_dims: Vec<usize>) -> Self {
        Self { layer_dims, head: None, dropout: default_dropout(), output_activation: Activation::Relu }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Validation("encoder needs at least input and output dims".into()));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Validation("layer dims must be positive".into()));
        }
        if let Some(h) = self.head {
            if h.hidden == 0 || h.output == 0 {
                return Err(Error::Validation("head dims must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        match self.head {
            Some(h) => h.output,
            None => *self.layer_dims.last().unwrap(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Step {
    Dense(usize),
    Relu,
    Standardize,
    Dropout,
}

/// Encoder parameters. `dense` holds the body layers followed by the two head
/// layers when a head is configured.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    spec: EncoderSpec,
    pub dense: Vec<Dense>,
    pub norm: Option<Standardizer>,
    version: u64,
}

impl EncoderParams {
    pub fn new(spec: EncoderSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut dense: Vec<Dense> =
            spec.layer_dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        let mut norm = None;
        if let Some(h) = spec.head {
            let body_out = *spec.layer_dims.last().unwrap();
            dense.push(Dense::init(body_out, h.hidden, rng));
            dense.push(Dense::init(h.hidden, h.output, rng));
            norm = Some(Standardizer::identity(h.hidden));
        }
        Ok(Self { spec, dense, norm, version: 0 })
    }

    /// Builds parameters from explicit layers, validating every shape.
    pub fn from_parts(spec: EncoderSpec, dense: Vec<Dense>, norm: Option<Standardizer>) -> Result<Self> {
        spec.validate()?;
        let mut expected: Vec<(usize, usize)> =
            spec.layer_dims.windows(2).map(|w| (w[1], w[0])).collect();
        if let Some(h) = spec.head {
            expected.push((h.hidden, *spec.layer_dims.last().unwrap()));
            expected.push((h.output, h.hidden));
            match &norm {
                Some(n) if n.mean.len() == h.hidden && n.std.len() == h.hidden => {
                    if n.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                        return Err(Error::Validation("standardizer std must be positive".into()));
                    }
                    if n.mean.iter().any(|m| !m.is_finite()) {
                        return Err(Error::NonFinite("standardizer mean".into()));
                    }
                }
                _ => return Err(shape_err!("head requires standardizer of width {}", h.hidden)),
            }
        } else if norm.is_some() {
            return Err(shape_err!("standardizer given without a head"));
        }
        if expected.len() != dense.len() {
            return Err(shape_err!("expected {} dense layers, got {}", expected.len(), dense.len()));
        }
        for (i, (d, &(o, n))) in dense.iter().zip(&expected).enumerate() {
            if d.weight.shape() != (o, n) || d.bias.len() != o {
                return Err(shape_err!(
                    "layer {i}: weight {:?} bias {}, expected ({o}, {n})",
                    d.weight.shape(),
                    d.bias.len()
                ));
            }
            if !d.weight.is_finite() || d.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("layer {i} parameters")));
            }
        }
        Ok(Self { spec, dense, norm, version: 0 })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    pub fn num_params(&self) -> usize {
        self.dense.iter().map(Dense::num_params).sum()
    }

    /// Monotone counter bumped on every parameter mutation through [`Self::touch`].
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Marks the parameters as modified, invalidating outstanding caches.
    pub fn touch(&mut self) {
        self.version += 1;
    }

    fn steps(&self) -> Vec<Step> {
        let n_body = self.spec.layer_dims.len() - 1;
        let out_relu = self.spec.output_activation == Activation::Relu;
        let mut steps = Vec::new();
        for l in 0..n_body {
            steps.push(Step::Dense(l));
            if l + 1 < n_body || self.spec.head.is_some() || out_relu {
                steps.push(Step::Relu);
            }
        }
        if self.spec.head.is_some() {
            steps.extend([Step::Dense(n_body), Step::Standardize, Step::Relu]);
            if self.spec.dropout > 0.0 {
                steps.push(Step::Dropout);
            }
            steps.push(Step::Dense(n_body + 1));
            if out_relu {
                steps.push(Step::Relu);
            }
        }
        steps
    }

    /// Sets the head standardizer. No-op without a head.
    pub fn set_standardizer(&mut self, s: Standardizer) -> Result<()> {
        match (&mut self.norm, self.spec.head) {
            (Some(n), Some(h)) => {
                if s.mean.len() != h.hidden || s.std.len() != h.hidden {
                    return Err(shape_err!("standardizer width {} != {}", s.mean.len(), h.hidden));
                }
                *n = s;
                self.touch();
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    batch: usize,
    /// Input to each step.
    inputs: Vec<Matrix>,
    masks: Vec<Option<Vec<f64>>>,
    /// Pre-normalization activations of the head, for statistics tracking.
    head_pre: Option<Matrix>,
    /// Batch mean and `sqrt(var + eps)` per column when normalizing with batch statistics.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
    stat_rows: usize,
}

impl ForwardCache {
    pub fn head_preactivations(&self) -> Option<&Matrix> {
        self.head_pre.as_ref()
    }
}

/// Parameter gradients in the same layout as [`EncoderParams::dense`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dense: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            dense: params.dense.iter().map(|d| Dense::zeros(d.input_dim(), d.output_dim())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.dense
            .iter()
            .all(|d| d.weight.as_slice().iter().chain(&d.bias).all(|v| *v == 0.0))
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.dense.iter().flat_map(|d| d.weight.as_slice().iter().chain(&d.bias).copied())
    }
}

/// Variance floor of the head's batch normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Encodes `inputs`. In train mode dropout masks are drawn from `rng`; two calls
/// with equal generator states produce identical masks. Batch normalization uses
/// statistics of the whole batch in train mode and the stored running
/// statistics in eval mode.
pub fn forward(
    params: &EncoderParams,
    inputs: &Matrix,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<(Matrix, ForwardCache)> {
    forward_with_stat_rows(params, inputs, train_mode, inputs.rows(), rng)
}

/// Like [`forward`], but train-mode normalization statistics come from the
/// first `stat_rows` rows only and are applied to every row.
pub fn forward_with_stat_rows(
    params: &EncoderParams,
    inputs: &Matrix,
    train_mode: bool,
    stat_rows: usize,
    rng: &mut Rng,
) -> Result<(Matrix, ForwardCache)> {
    if train_mode && params.spec.head.is_some() && (stat_rows == 0 || stat_rows > inputs.rows()) {
        return Err(Error::Usage(format!("{stat_rows} statistics rows for a batch of {}", inputs.rows())));
    }
    if inputs.cols() != params.input_dim() {
        return Err(shape_err!("input has {} columns, encoder expects {}", inputs.cols(), params.input_dim()));
    }
    if !inputs.is_finite() {
        return Err(Error::NonFinite("encoder input".into()));
    }
    let steps = params.steps();
    let mut inputs_per_step = Vec::with_capacity(steps.len());
    let mut masks = Vec::with_capacity(steps.len());
    let mut head_pre = None;
    let mut batch_stats = None;
    let mut x = inputs.clone();
    for step in steps {
        let mut mask = None;
        let y = match step {
            Step::Dense(i) => params.dense[i].forward(&x)?,
            Step::Relu => {
                let mut y = x.clone();
                y.map_inplace(|v| v.max(0.0));
                y
            }
            Step::Standardize => {
                head_pre = Some(x.clone());
                let (mean, std) = if train_mode {
                    let rows: Vec<usize> = (0..stat_rows).collect();
                    let r = x.select_rows(&rows);
                    let mean = r.col_means();
                    let mut var = vec![0.0; r.cols()];
                    for row in r.row_iter() {
                        for ((v, a), m) in var.iter_mut().zip(row).zip(&mean) {
                            *v += (a - m) * (a - m) / stat_rows as f64;
                        }
                    }
                    let std: Vec<f64> = var.iter().map(|v| (v + NORM_EPS).sqrt()).collect();
                    batch_stats = Some((mean.clone(), std.clone()));
                    (mean, std)
                } else {
                    let norm = params.norm.as_ref().expect("head without standardizer");
                    (norm.mean.clone(), norm.std.clone())
                };
                let mut y = x.clone();
                for r in 0..y.rows() {
                    for ((v, m), s) in y.row_mut(r).iter_mut().zip(&mean).zip(&std) {
                        *v = (*v - m) / s;
                    }
                }
                y
            }
            Step::Dropout => {
                let mut y = x.clone();
                if train_mode {
                    let p = params.spec.dropout;
                    let keep = 1.0 / (1.0 - p);
                    let m: Vec<f64> = (0..y.as_slice().len())
                        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
                        .collect();
                    y.as_mut_slice().iter_mut().zip(&m).for_each(|(v, k)| *v *= k);
                    mask = Some(m);
                }
                y
            }
        };
        inputs_per_step.push(x);
        masks.push(mask);
        x = y;
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("encoder output".into()));
    }
    Ok((
        x,
        ForwardCache {
            version: params.version,
            batch: inputs.rows(),
            inputs: inputs_per_step,
            masks,
            head_pre,
            batch_stats,
            stat_rows,
        },
    ))
}

/// Back-propagates `grad_features` (d loss / d features) through the pass recorded
/// in `cache`. Returns parameter gradients and d loss / d inputs.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_features: &Matrix,
) -> Result<(Gradients, Matrix)> {
    if cache.version != params.version {
        return Err(Error::Usage(format!(
            "cache from parameter version {} used with version {}",
            cache.version, params.version
        )));
    }
    let steps = params.steps();
    if steps.len() != cache.inputs.len() {
        return Err(Error::Usage("cache was produced by a different architecture".into()));
    }
    if grad_features.shape() != (cache.batch, params.feature_dim()) {
        return Err(shape_err!(
            "feature gradient {:?}, expected ({}, {})",
            grad_features.shape(),
            cache.batch,
            params.feature_dim()
        ));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut g = grad_features.clone();
    for (k, step) in steps.iter().enumerate().rev() {
        let x = &cache.inputs[k];
        match *step {
            Step::Dense(i) => {
                let gw = g.t_matmul(x)?;
                grads.dense[i].weight = gw;
                grads.dense[i].bias = g.col_sums();
                g = g.matmul(&params.dense[i].weight)?;
            }
            Step::Relu => {
                g.as_mut_slice()
                    .iter_mut()
                    .zip(x.as_slice())
                    .for_each(|(gv, xv)| if *xv <= 0.0 { *gv = 0.0 });
            }
            Step::Standardize => match &cache.batch_stats {
                Some((mean, std)) => g = batch_norm_backward(x, &g, mean, std, cache.stat_rows),
                None => {
                    let norm = params.norm.as_ref().expect("head without standardizer");
                    for r in 0..g.rows() {
                        g.row_mut(r).iter_mut().zip(&norm.std).for_each(|(v, s)| *v /= s);
                    }
                }
            },
            Step::Dropout => {
                if let Some(m) = &cache.masks[k] {
                    g.as_mut_slice().iter_mut().zip(m).for_each(|(v, k)| *v *= k);
                }
            }
        }
    }
    Ok((grads, g))
}

/// Gradient through `y = (x - mean) / std` where `mean` and `std` are computed
/// from the first `m` rows of `x`.
fn batch_norm_backward(x: &Matrix, g: &Matrix, mean: &[f64], std: &[f64], m: usize) -> Matrix {
    let cols = x.cols();
    let mut sum_g = vec![0.0; cols];
    let mut sum_gx = vec![0.0; cols];
    for (xr, gr) in x.row_iter().zip(g.row_iter()) {
        for j in 0..cols {
            sum_g[j] += gr[j];
            sum_gx[j] += gr[j] * (xr[j] - mean[j]) / std[j];
        }
    }
    let mut out = g.clone();
    let inv_m = 1.0 / m as f64;
    for r in 0..x.rows() {
        let xr = x.row(r).to_vec();
        let o = out.row_mut(r);
        for j in 0..cols {
            o[j] /= std[j];
            if r < m {
                let xhat = (xr[j] - mean[j]) / std[j];
                o[j] -= inv_m / std[j] * (sum_g[j] + xhat * sum_gx[j]);
            }
        }
    }
    out
}

/// Checkpoint file, JSON-encoded. See `README.md` for the field list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub encoder: EncoderSpec,
    pub dense: Vec<Dense>,
    #[serde(default)]
    pub standardizer: Option<Standardizer>,
}

pub const CHECKPOINT_FORMAT: &str = "subuda-encoder";
pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_params(p: &EncoderParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            encoder: p.spec.clone(),
            dense: p.dense.clone(),
            standardizer: p.norm.clone(),
        }
    }

    pub fn into_params(self) -> Result<EncoderParams> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!("unexpected checkpoint format {:?}", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {}", self.version)));
        }
        EncoderParams::from_parts(self.encoder, self.dense, self.standardizer)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses and validates a checkpoint.
    pub fn parse(text: &str) -> Result<EncoderParams> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        ck.into_params()
    }
}
