//! Dense feed-forward Q-network with hand-written backpropagation.
//!
//! Parameters live in one flat `f64` buffer, laid out layer by layer with
//! each layer's weights (row-major, `out x in`) followed by its biases. The
//! same layout is used by [`Gradients`], the optimizer moments and the
//! checkpoint format, so updates are plain elementwise loops.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("network needs at least 2 layer sizes, got {0}")]
    TooFewLayers(usize),
    #[error("layer sizes must be positive")]
    ZeroWidth,
    #[error("input has length {got}, network expects {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("output gradient has length {got}, network produces {expected}")]
    OutputDim { expected: usize, got: usize },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("non-finite gradient entry at index {0}")]
    NonFiniteGradient(usize),
    #[error("non-finite loss value {0}")]
    NonFiniteLoss(f64),
    #[error("parameter buffer has {got} entries, layer sizes need {expected}")]
    BufferLen { expected: usize, got: usize },
    #[error("polyak coefficient must lie in [0, 1], got {0}")]
    Tau(f64),
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Number of scalars needed for a network with these layer sizes.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn layer_offsets(layer_sizes: &[usize]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(layer_sizes.len());
    let mut at = 0;
    offsets.push(0);
    for w in layer_sizes.windows(2) {
        at += w[0] * w[1] + w[1];
        offsets.push(at);
    }
    offsets
}

fn check_sizes(layer_sizes: &[usize]) -> Result<(), NnError> {
    if layer_sizes.len() < 2 {
        return Err(NnError::TooFewLayers(layer_sizes.len()));
    }
    if layer_sizes.contains(&0) {
        return Err(NnError::ZeroWidth);
    }
    Ok(())
}

/// Weights and biases of a ReLU MLP with a linear output layer.
#[derive(Debug, Serialize, Deserialize)]
pub struct MlpParams {
    layer_sizes: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip, default = "fresh_id")]
    id: u64,
    #[serde(skip)]
    revision: u64,
}

impl Clone for MlpParams {
    fn clone(&self) -> Self {
        Self {
            layer_sizes: self.layer_sizes.clone(),
            data: self.data.clone(),
            id: fresh_id(),
            revision: 0,
        }
    }
}

impl PartialEq for MlpParams {
    fn eq(&self, other: &Self) -> bool {
        self.layer_sizes == other.layer_sizes && self.data == other.data
    }
}

impl MlpParams {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self, NnError> {
        check_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            data: vec![0.0; param_count(layer_sizes)],
            id: fresh_id(),
            revision: 0,
        })
    }

    /// He-normal weights (variance `2 / fan_in`) and zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self, NnError> {
        let mut params = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..params.num_layers() {
            let fan_in = layer_sizes[l];
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for w in params.weights_mut(l) {
                *w = normal.sample(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn from_flat(layer_sizes: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        check_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if data.len() != expected {
            return Err(NnError::BufferLen {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            data,
            id: fresh_id(),
            revision: 0,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated")
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the flat buffer. Invalidates outstanding caches.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.revision += 1;
        &mut self.data
    }

    fn span(&self, layer: usize) -> (usize, usize, usize) {
        let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
        let start = layer_offsets(&self.layer_sizes)[layer];
        (
            start,
            start + fan_in * fan_out,
            start + fan_in * fan_out + fan_out,
        )
    }

    /// Row-major `out x in` weight block of `layer`.
    pub fn weights(&self, layer: usize) -> &[f64] {
        let (a, b, _) = self.span(layer);
        &self.data[a..b]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let (_, b, c) = self.span(layer);
        &self.data[b..c]
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut [f64] {
        let (a, b, _) = self.span(layer);
        self.revision += 1;
        &mut self.data[a..b]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut [f64] {
        let (_, b, c) = self.span(layer);
        self.revision += 1;
        &mut self.data[b..c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over layer sizes and the bit patterns of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: [u8; 8]| {
            for b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for &s in &self.layer_sizes {
            eat((s as u64).to_le_bytes());
        }
        for v in &self.data {
            eat(v.to_bits().to_le_bytes());
        }
        h
    }

    fn check_same_shape(&self, other_sizes: &[usize]) -> Result<(), NnError> {
        if self.layer_sizes != other_sizes {
            return Err(NnError::Shape(
                self.layer_sizes.clone(),
                other_sizes.to_vec(),
            ));
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NnError> {
        if input.len() != self.input_dim() {
            return Err(NnError::InputDim {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, x: &[f64], out: &mut Vec<f64>) {
        let w = self.weights(layer);
        let b = self.biases(layer);
        let fan_in = x.len();
        out.clear();
        out.extend(b.iter().enumerate().map(|(o, &bias)| {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        }));
    }

    /// Output of the network without keeping intermediates.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        let mut out = Vec::new();
        for l in 0..self.num_layers() {
            self.affine(l, &x, &mut out);
            if l + 1 < self.num_layers() {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut x, &mut out);
        }
        Ok(x)
    }

    /// Output of the network plus the activations needed by [`Self::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        self.check_input(input)?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre = Vec::with_capacity(self.num_layers());
        let mut x = input.to_vec();
        for l in 0..self.num_layers() {
            let mut z = Vec::new();
            self.affine(l, &x, &mut z);
            let next = if l + 1 < self.num_layers() {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            inputs.push(x);
            pre.push(z);
            x = next;
        }
        let cache = ForwardCache {
            id: self.id,
            revision: self.revision,
            inputs,
            pre,
        };
        Ok((x, cache))
    }

    /// Gradient of `<output, output_grad>` with respect to every parameter.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
    ) -> Result<Gradients, NnError> {
        let mut grads = Gradients::zeros_like(self);
        self.backward_into(cache, output_grad, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Self::backward`], accumulating into `grads`.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        output_grad: &[f64],
        grads: &mut Gradients,
    ) -> Result<(), NnError> {
        if cache.id != self.id || cache.revision != self.revision {
            return Err(NnError::StaleCache);
        }
        if output_grad.len() != self.output_dim() {
            return Err(NnError::OutputDim {
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        self.check_same_shape(&grads.layer_sizes)?;
        let mut delta = output_grad.to_vec();
        for l in (0..self.num_layers()).rev() {
            if l + 1 < self.num_layers() {
                for (d, z) in delta.iter_mut().zip(&cache.pre[l]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let x = &cache.inputs[l];
            let fan_in = x.len();
            let (a, b, c) = self.span(l);
            {
                let gw = &mut grads.data[a..b];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (g, &xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            for (g, &d) in grads.data[b..c].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 {
                let w = self.weights(l);
                let mut prev = vec![0.0; fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &wi) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                        *p += d * wi;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }
}

/// Activations recorded by [`MlpParams::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    id: u64,
    revision: u64,
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

/// A gradient (or any other tensor) with the parameter layout of an MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layer_sizes: Vec<usize>,
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            layer_sizes: params.layer_sizes.clone(),
            data: vec![0.0; params.data.len()],
        }
    }

    pub fn from_flat(layer_sizes: &[usize], data: Vec<f64>) -> Result<Self, NnError> {
        check_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if data.len() != expected {
            return Err(NnError::BufferLen {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            data,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn weights(&self, layer: usize) -> &[f64] {
        let start = layer_offsets(&self.layer_sizes)[layer];
        &self.data[start..start + self.layer_sizes[layer] * self.layer_sizes[layer + 1]]
    }

    pub fn biases(&self, layer: usize) -> &[f64] {
        let start = layer_offsets(&self.layer_sizes)[layer]
            + self.layer_sizes[layer] * self.layer_sizes[layer + 1];
        &self.data[start..start + self.layer_sizes[layer + 1]]
    }

    /// Index range of `layer` (weights then biases) in the flat buffer.
    pub fn layer_range(&self, layer: usize) -> std::ops::Range<usize> {
        let offsets = layer_offsets(&self.layer_sizes);
        offsets[layer]..offsets[layer + 1]
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<(), NnError> {
        if self.layer_sizes != other.layer_sizes {
            return Err(NnError::Shape(
                self.layer_sizes.clone(),
                other.layer_sizes.clone(),
            ));
        }
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// `max_i |candidate_i - reference_i| / max(max_i |reference_i|, 1e-12)`.
///
/// The denominator is the reference gradient's sup norm, so coordinates
/// whose true value cancels to nearly zero do not dominate the measure.
pub fn max_relative_deviation(candidate: &[f64], reference: &[f64]) -> f64 {
    let scale = reference
        .iter()
        .fold(0.0f64, |m, g| m.max(g.abs()))
        .max(1e-12);
    max_abs_deviation(candidate, reference) / scale
}

pub fn max_abs_deviation(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Adaptive-moment optimizer state, shaped like the parameters it updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            m: vec![0.0; params.data.len()],
            v: vec![0.0; params.data.len()],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), NnError> {
    params.check_same_shape(&grads.layer_sizes)?;
    if state.m.len() != params.data.len() {
        return Err(NnError::BufferLen {
            expected: params.data.len(),
            got: state.m.len(),
        });
    }
    if let Some(i) = grads.data.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient(i));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((p, g), m), v) in params
        .data_mut()
        .iter_mut()
        .zip(&grads.data)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// `target <- (1 - tau) target + tau main`, elementwise.
pub fn polyak_update(target: &mut MlpParams, main: &MlpParams, tau: f64) -> Result<(), NnError> {
    target.check_same_shape(&main.layer_sizes)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(NnError::Tau(tau));
    }
    if tau == 0.0 {
        return Ok(());
    }
    for (t, m) in target.data_mut().iter_mut().zip(&main.data) {
        *t = (1.0 - tau) * *t + tau * m;
    }
    Ok(())
}

/// Central-difference gradient of `loss_fn` at `params`, with step
/// `epsilon * max(1, |theta_i|)` per coordinate.
pub fn finite_diff_grad<F>(
    mut loss_fn: F,
    params: &MlpParams,
    epsilon: f64,
) -> Result<Gradients, NnError>
where
    F: FnMut(&MlpParams) -> f64,
{
    let mut probe = params.clone();
    let mut out = Gradients::zeros_like(params);
    for i in 0..params.data.len() {
        let theta = params.data[i];
        let h = epsilon * theta.abs().max(1.0);
        probe.data_mut()[i] = theta + h;
        let up = loss_fn(&probe);
        probe.data_mut()[i] = theta - h;
        let down = loss_fn(&probe);
        probe.data_mut()[i] = theta;
        for v in [up, down] {
            if !v.is_finite() {
                return Err(NnError::NonFiniteLoss(v));
            }
        }
        out.data[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}
