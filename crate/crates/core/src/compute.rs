//! Dense numeric core: linear layers, activations, losses and gradient gates.
//!
//! Everything is `f64`. Gradients accumulate additively into per-layer
//! buffers until they are explicitly zeroed.

use rand::Rng;
use thiserror::Error;

/// Probabilities are floored at this value before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ComputeError {
    #[error("shape mismatch: expected length {expected}, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },
    #[error("configuration error: {0}")]
    Config(String),
}

/// A mutable view of one parameter tensor and its gradient accumulator.
pub struct ParamBlock<'a> {
    pub values: &'a mut [f64],
    pub grads: &'a mut [f64],
}

/// Fully connected layer `y = W x + b` with `W` stored row-major (out x in).
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    in_dim: usize,
    out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_grad: Vec<f64>,
    pub bias_grad: Vec<f64>,
}

impl LinearLayer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
            weight_grad: vec![0.0; in_dim * out_dim],
            bias_grad: vec![0.0; out_dim],
        }
    }

    /// Weights uniform in (-a, a) with `a = sqrt(6 / (in + out))`; zero bias.
    pub fn init_uniform(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim);
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-a..a);
        }
        layer
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self, ComputeError> {
        check_len(weights.len(), in_dim * out_dim)?;
        check_len(bias.len(), out_dim)?;
        Ok(LinearLayer {
            in_dim,
            out_dim,
            weights,
            bias,
            weight_grad: vec![0.0; in_dim * out_dim],
            bias_grad: vec![0.0; out_dim],
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ComputeError> {
        check_len(x.len(), self.in_dim)?;
        Ok(self
            .weights
            .chunks_exact(self.in_dim.max(1))
            .take(self.out_dim)
            .zip(&self.bias)
            .map(|(row, b)| b + dot(row, x))
            .collect())
    }

    /// Adds `dL/dW = g xᵀ` and `dL/db = g` to the accumulators.
    pub fn accumulate_param_grads(&mut self, x: &[f64], grad_out: &[f64]) {
        debug_assert_eq!(x.len(), self.in_dim);
        debug_assert_eq!(grad_out.len(), self.out_dim);
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            self.bias_grad[o] += g;
            let row = &mut self.weight_grad[o * self.in_dim..(o + 1) * self.in_dim];
            for (acc, xi) in row.iter_mut().zip(x) {
                *acc += g * xi;
            }
        }
    }

    /// `Wᵀ g`, treating the weights as constants.
    pub fn input_grad(&self, grad_out: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            for (d, w) in dx.iter_mut().zip(row) {
                *d += g * w;
            }
        }
        dx
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, x: &[f64], grad_out: &[f64]) -> Vec<f64> {
        self.accumulate_param_grads(x, grad_out);
        self.input_grad(grad_out)
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.fill(0.0);
        self.bias_grad.fill(0.0);
    }

    pub fn param_blocks(&mut self) -> [ParamBlock<'_>; 2] {
        [
            ParamBlock {
                values: &mut self.weights,
                grads: &mut self.weight_grad,
            },
            ParamBlock {
                values: &mut self.bias,
                grads: &mut self.bias_grad,
            },
        ]
    }
}

fn check_len(found: usize, expected: usize) -> Result<(), ComputeError> {
    if found == expected {
        Ok(())
    } else {
        Err(ComputeError::ShapeMismatch { expected, found })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn tanh_forward(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v.tanh()).collect()
}

/// Gradient through `y = tanh(x)` given the outputs `y`.
pub fn tanh_backward(y: &[f64], grad_out: &[f64]) -> Vec<f64> {
    y.iter()
        .zip(grad_out)
        .map(|(y, g)| g * (1.0 - y * y))
        .collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Vector-Jacobian product of softmax: `dz_i = p_i (g_i - Σ_j p_j g_j)`.
pub fn softmax_backward(probs: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_out);
    probs
        .iter()
        .zip(grad_out)
        .map(|(p, g)| p * (g - inner))
        .collect()
}

/// `-ln max(probs[target], 1e-12)`.
pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64, ComputeError> {
    let p = probs.get(target).ok_or(ComputeError::ClassOutOfRange {
        index: target,
        classes: probs.len(),
    })?;
    Ok(-floored(*p).ln())
}

// `f64::max` would turn a NaN probability into the floor and hide a diverged model.
fn floored(p: f64) -> f64 {
    if p < PROB_FLOOR {
        PROB_FLOOR
    } else {
        p
    }
}

/// Binary cross-entropy of the positive-class probability.
pub fn binary_cross_entropy(p_positive: f64, target: bool) -> f64 {
    if target {
        -floored(p_positive).ln()
    } else {
        -floored(1.0 - p_positive).ln()
    }
}

/// Gradient of `cross_entropy(softmax(z), target)` with respect to `z`.
pub fn softmax_cross_entropy_grad(probs: &[f64], target: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(i, p)| if i == target { p - 1.0 } else { *p })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateMode {
    Pass,
    Stop,
    /// Only meaningful on a layer boundary: the layer's parameters receive no
    /// gradient from this path, but the gradient still reaches the layer input.
    StopParamsOnly,
}

/// Identity in the forward direction; controls what flows backward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradientGate {
    pub mode: GateMode,
}

impl GradientGate {
    pub const PASS: GradientGate = GradientGate {
        mode: GateMode::Pass,
    };
    pub const STOP: GradientGate = GradientGate {
        mode: GateMode::Stop,
    };
    pub const STOP_PARAMS_ONLY: GradientGate = GradientGate {
        mode: GateMode::StopParamsOnly,
    };

    pub fn forward<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        x
    }

    /// Backward over a plain (non-layer) edge.
    pub fn backward(&self, upstream: &[f64]) -> Result<Vec<f64>, ComputeError> {
        match self.mode {
            GateMode::Pass => Ok(upstream.to_vec()),
            GateMode::Stop => Ok(vec![0.0; upstream.len()]),
            GateMode::StopParamsOnly => Err(ComputeError::Config(
                "stop-params-only gate is only defined on a layer boundary".into(),
            )),
        }
    }

    /// Backward through `layer` (whose forward input was `x`) on this path.
    /// Returns the gradient with respect to `x`.
    pub fn backward_through_layer(
        &self,
        layer: &mut LinearLayer,
        x: &[f64],
        upstream: &[f64],
    ) -> Vec<f64> {
        match self.mode {
            GateMode::Pass => layer.backward(x, upstream),
            GateMode::Stop => vec![0.0; layer.in_dim()],
            GateMode::StopParamsOnly => layer.input_grad(upstream),
        }
    }
}
