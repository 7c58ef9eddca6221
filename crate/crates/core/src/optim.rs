//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::nn::{Dense, EncoderParams, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &EncoderParams) -> Self {
        Self {
            config,
            first_moment: Gradients::zeros_like(params),
            second_moment: Gradients::zeros_like(params),
            step_count: 0,
        }
    }

    /// One Adam update. Parameters whose gradient and moments are all zero do not move.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &Gradients) -> Result<()> {
        if grads.dense.len() != params.dense.len() {
            return Err(shape_err!("{} gradient layers for {} parameter layers", grads.dense.len(), params.dense.len()));
        }
        for (g, p) in grads.dense.iter().zip(&params.dense) {
            if g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len() {
                return Err(shape_err!("gradient {:?} vs parameter {:?}", g.weight.shape(), p.weight.shape()));
            }
        }
        self.step_count += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= learning_rate * mhat / (vhat.sqrt() + eps);
            }
        };
        let layers = params
            .dense
            .iter_mut()
            .zip(&grads.dense)
            .zip(self.first_moment.dense.iter_mut().zip(self.second_moment.dense.iter_mut()));
        for ((p, g), (m, v)) in layers {
            let Dense { weight, bias } = p;
            update(weight.as_mut_slice(), g.weight.as_slice(), m.weight.as_mut_slice(), v.weight.as_mut_slice());
            update(bias, &g.bias, &mut m.bias, &mut v.bias);
        }
        params.touch();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::nn::{Activation, EncoderSpec};

    fn scalar_params(values: &[f64]) -> EncoderParams {
        let spec = EncoderSpec {
            output_activation: Activation::Identity,
            ..EncoderSpec::mlp(vec![values.len(), 1])
        };
        let dense = vec![Dense { weight: Matrix::from_vec(1, values.len(), values.to_vec()).unwrap(), bias: vec![0.0] }];
        EncoderParams::from_parts(spec, dense, None).unwrap()
    }

    fn grads_of(values: &[f64]) -> Gradients {
        Gradients {
            dense: vec![Dense { weight: Matrix::from_vec(1, values.len(), values.to_vec()).unwrap(), bias: vec![0.0] }],
        }
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = scalar_params(&[1.0, -2.0]);
        let before = p.dense.clone();
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        opt.step(&mut p, &grads_of(&[0.0, 0.0])).unwrap();
        assert_eq!(p.dense, before);
        assert!(opt.first_moment.is_zero() && opt.second_moment.is_zero());
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // t=1: mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps).
        let g = 0.37;
        let lr = 0.1;
        let mut p = scalar_params(&[1.0]);
        let mut opt = OptimizerState::new(AdamConfig { learning_rate: lr, ..Default::default() }, &p);
        opt.step(&mut p, &grads_of(&[g])).unwrap();
        let expected = 1.0 - lr * g / (g + 1e-8);
        assert!((p.dense[0].weight[(0, 0)] - expected).abs() < 1e-15);
        assert!((p.dense[0].weight[(0, 0)] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn opposite_gradients_move_symmetrically() {
        let mut p = scalar_params(&[0.5, 0.5]);
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            opt.step(&mut p, &grads_of(&[0.2, -0.2])).unwrap();
        }
        let w = p.dense[0].weight.as_slice();
        assert!(((w[0] - 0.5) + (w[1] - 0.5)).abs() < 1e-15);
        assert!(w[0] < 0.5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_params(&[0.5, 0.5]);
        let mut opt = OptimizerState::new(AdamConfig::default(), &p);
        assert!(opt.step(&mut p, &grads_of(&[1.0])).is_err());
    }
}
