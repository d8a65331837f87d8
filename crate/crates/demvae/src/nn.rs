//! Minimal dense network stack with hand-derived backpropagation.
//!
//! No autodiff: each layer caches its activations on a [`Tape`] during
//! [`DenseNet::forward`] and [`DenseNet::backward`] applies the chain rule in
//! reverse, accumulating parameter gradients into buffers owned by the net.
//! Also provides the reparameterization samplers, a standard Adam optimizer
//! over flat parameter vectors, and the central-difference gradient checker
//! used throughout the test suites.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::softmax;

/// log-variances are clamped to ±`LOG_VAR_CLAMP` before exponentiation.
pub const LOG_VAR_CLAMP: f64 = 8.0;

/// Step size used by the finite-difference oracles.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Row-major `out_dim × in_dim`.
    weight: Vec<f64>,
    bias: Vec<f64>,
    #[serde(skip)]
    grad_weight: Vec<f64>,
    #[serde(skip)]
    grad_bias: Vec<f64>,
}

/// Cached activations from one forward pass: `activations[0]` is the input,
/// `activations[l + 1]` the post-activation output of layer `l`.
#[derive(Debug, Clone)]
pub struct Tape {
    activations: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape is never empty")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    layers: Vec<DenseLayer>,
}

impl DenseNet {
    /// Fully connected net with the given layer sizes; weights drawn from
    /// `N(0, 1/fan_in)`, biases zero.
    pub fn new(dims: &[usize], activations: &[Activation], rng: &mut ChaCha8Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidArgument("need at least one layer".into()));
        }
        if activations.len() != dims.len() - 1 {
            return Err(Error::Shape {
                expected: dims.len() - 1,
                got: activations.len(),
            });
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("zero-width layer".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (l, &act) in activations.iter().enumerate() {
            let (in_dim, out_dim) = (dims[l], dims[l + 1]);
            let scale = 1.0 / (in_dim as f64).sqrt();
            let weight: Vec<f64> = (0..in_dim * out_dim)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    e * scale
                })
                .collect();
            layers.push(DenseLayer {
                in_dim,
                out_dim,
                activation: act,
                weight,
                bias: vec![0.0; out_dim],
                grad_weight: vec![0.0; in_dim * out_dim],
                grad_bias: vec![0.0; out_dim],
            });
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
        if input.len() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(input.to_vec());
        for layer in &self.layers {
            let prev = activations.last().expect("non-empty");
            let mut out = vec![0.0; layer.out_dim];
            for i in 0..layer.out_dim {
                let row = &layer.weight[i * layer.in_dim..(i + 1) * layer.in_dim];
                let mut acc = layer.bias[i];
                for (w, x) in row.iter().zip(prev) {
                    acc += w * x;
                }
                out[i] = match layer.activation {
                    Activation::Tanh => acc.tanh(),
                    Activation::Identity => acc,
                };
            }
            activations.push(out);
        }
        let output = activations.last().expect("non-empty").clone();
        Ok((output, Tape { activations }))
    }

    /// Backpropagate `output_grad` through the tape, accumulating parameter
    /// gradients; returns the gradient with respect to the input.
    pub fn backward(&mut self, tape: &Tape, output_grad: &[f64]) -> Result<Vec<f64>> {
        if tape.activations.len() != self.layers.len() + 1 {
            return Err(Error::Shape {
                expected: self.layers.len() + 1,
                got: tape.activations.len(),
            });
        }
        if output_grad.len() != self.output_dim() {
            return Err(Error::Shape {
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        let mut grad = output_grad.to_vec();
        for (l, layer) in self.layers.iter_mut().enumerate().rev() {
            let out = &tape.activations[l + 1];
            let input = &tape.activations[l];
            // gradient through the activation, using post-activation values
            let mut grad_pre = grad;
            if layer.activation == Activation::Tanh {
                for (g, a) in grad_pre.iter_mut().zip(out) {
                    *g *= 1.0 - a * a;
                }
            }
            let mut grad_input = vec![0.0; layer.in_dim];
            for i in 0..layer.out_dim {
                let g = grad_pre[i];
                layer.grad_bias[i] += g;
                let row = &layer.weight[i * layer.in_dim..(i + 1) * layer.in_dim];
                let grow = &mut layer.grad_weight[i * layer.in_dim..(i + 1) * layer.in_dim];
                for j in 0..layer.in_dim {
                    grow[j] += g * input[j];
                    grad_input[j] += row[j] * g;
                }
            }
            grad = grad_input;
        }
        Ok(grad)
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            layer.grad_weight.iter_mut().for_each(|g| *g = 0.0);
            layer.grad_bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Re-create gradient buffers after deserialization (they are skipped).
    pub fn ensure_grad_buffers(&mut self) {
        for layer in &mut self.layers {
            layer.grad_weight.resize(layer.in_dim * layer.out_dim, 0.0);
            layer.grad_bias.resize(layer.out_dim, 0.0);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn append_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
    }

    pub fn append_grads(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.grad_weight);
            out.extend_from_slice(&layer.grad_bias);
        }
    }

    pub fn load_params(&mut self, src: &[f64], cursor: &mut usize) {
        for layer in &mut self.layers {
            let nw = layer.weight.len();
            layer.weight.copy_from_slice(&src[*cursor..*cursor + nw]);
            *cursor += nw;
            let nb = layer.bias.len();
            layer.bias.copy_from_slice(&src[*cursor..*cursor + nb]);
            *cursor += nb;
        }
    }
}

/// `z = μ + exp(½·clamp(log_var))·noise`.
pub fn gaussian_reparam(mu: &[f64], log_var: &[f64], noise: &[f64]) -> Result<Vec<f64>> {
    if mu.len() != log_var.len() || mu.len() != noise.len() {
        return Err(Error::Shape {
            expected: mu.len(),
            got: log_var.len().min(noise.len()),
        });
    }
    Ok(mu
        .iter()
        .zip(log_var)
        .zip(noise)
        .map(|((&m, &lv), &e)| m + (0.5 * lv.clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)).exp() * e)
        .collect())
}

/// Backward rule for [`gaussian_reparam`]: `dz/dμ = 1`,
/// `dz/d log σ² = ½σ·noise` (zero where the clamp is active).
pub fn gaussian_reparam_backward(
    log_var: &[f64],
    noise: &[f64],
    upstream: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if log_var.len() != noise.len() || log_var.len() != upstream.len() {
        return Err(Error::Shape {
            expected: log_var.len(),
            got: noise.len().min(upstream.len()),
        });
    }
    let d_mu = upstream.to_vec();
    let d_log_var = log_var
        .iter()
        .zip(noise)
        .zip(upstream)
        .map(|((&lv, &e), &g)| {
            if lv.abs() < LOG_VAR_CLAMP {
                g * 0.5 * (0.5 * lv).exp() * e
            } else {
                0.0
            }
        })
        .collect();
    Ok((d_mu, d_log_var))
}

/// Gumbel-softmax relaxation: `softmax((logits + g)/τ)` with
/// `g = −ln(−ln u)`. With `hard` the argmax one-hot is returned (ties broken
/// to the lowest index); the straight-through convention treats that as
/// identity in the backward pass.
pub fn gumbel_softmax(
    logits: &[f64],
    temperature: f64,
    uniform_noise: &[f64],
    hard: bool,
) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::Domain(format!("temperature {temperature} must be > 0")));
    }
    if uniform_noise.len() != logits.len() {
        return Err(Error::Shape {
            expected: logits.len(),
            got: uniform_noise.len(),
        });
    }
    if uniform_noise.iter().any(|&u| u <= 0.0 || u >= 1.0) {
        return Err(Error::Domain("uniform noise must lie in (0, 1)".into()));
    }
    let perturbed: Vec<f64> = logits
        .iter()
        .zip(uniform_noise)
        .map(|(&l, &u)| (l + -(-u.ln()).ln()) / temperature)
        .collect();
    let soft = softmax(&perturbed);
    if !hard {
        return Ok(soft);
    }
    let mut best = 0;
    for (i, &p) in soft.iter().enumerate() {
        if p > soft[best] {
            best = i;
        }
    }
    let mut one_hot = vec![0.0; soft.len()];
    one_hot[best] = 1.0;
    Ok(one_hot)
}

/// Adam with bias-corrected moments over one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update: `p ← p − lr·m̂/(√v̂ + ε)`.
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grads: &[f64]) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::Shape {
            expected: state.m.len(),
            got: params.len().min(grads.len()),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for i in 0..params.len() {
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Central-difference gradient check.
///
/// Evaluates `loss` at `params ± h·e_i`, compares against `analytic`, and
/// returns the maximum relative error with denominator
/// `max(1, |analytic|, |numeric|)`. `params` is restored on return.
pub fn finite_diff_check<F>(mut loss: F, params: &mut [f64], analytic: &[f64], h: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "analytic gradient length");
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let saved = params[i];
        params[i] = saved + h;
        let hi = loss(params);
        params[i] = saved - h;
        let lo = loss(params);
        params[i] = saved;
        let numeric = (hi - lo) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max(rel);
    }
    worst
}
