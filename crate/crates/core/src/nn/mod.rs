//! Minimal feed-forward network substrate.
//!
//! Networks are a straight chain of 2-D convolutions and fully-connected
//! layers, each followed by an element-wise activation. Parameters live in a
//! single flat `f32` buffer (layer-major; weights row-major, then biases) so
//! that gradients from different losses can be combined element-wise.

mod checkpoint;
mod gradcheck;
mod kernels;

pub use checkpoint::{Checkpoint, CheckpointError, NamedNetwork};
pub use gradcheck::{finite_diff_grad, finite_diff_grad_net, reference_forward, relative_error, FD_STEP};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("layer {layer}: {message}")]
    Config { layer: usize, message: String },
    #[error("layer {layer}: expected input of {expected} values ({shape}), got {found}")]
    Shape {
        layer: usize,
        expected: usize,
        shape: String,
        found: usize,
    },
    #[error("upstream gradient has {found} values, network output has {expected}")]
    UpstreamShape { expected: usize, found: usize },
    #[error("tape was recorded against different parameters (stale or foreign tape)")]
    StaleTape,
    #[error("gradient set has {found} values, parameter set has {expected}")]
    GradShape { expected: usize, found: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f32),
}

/// Element-wise nonlinearity applied after a layer's affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, x: &mut [f32]) {
        match self {
            Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Sigmoid => x.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            Activation::Linear => {}
        }
    }

    /// Multiply `delta` by the activation derivative, expressed through the
    /// post-activation output.
    #[inline]
    fn backprop(self, output: &[f32], delta: &mut [f32]) {
        match self {
            Activation::Relu => {
                for (d, &y) in delta.iter_mut().zip(output) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (d, &y) in delta.iter_mut().zip(output) {
                    *d *= y * (1.0 - y);
                }
            }
            Activation::Linear => {}
        }
    }

    pub(crate) fn apply_f64(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Linear => x,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Sigmoid => 1,
            Activation::Linear => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Sigmoid),
            2 => Some(Activation::Linear),
            _ => None,
        }
    }
}

/// Channel-major tensor shape. Vectors are `(n, 1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn vector(len: usize) -> Self {
        Self::new(len, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub activation: Activation,
}

impl LayerSpec {
    pub const fn conv(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    ) -> Self {
        Self {
            kind: LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            },
            activation,
        }
    }

    pub const fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense { in_dim, out_dim },
            activation,
        }
    }

    /// Number of (weight, bias) parameters.
    pub fn param_counts(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (out_channels * in_channels * kernel * kernel, out_channels),
            LayerKind::Dense { in_dim, out_dim } => (in_dim * out_dim, out_dim),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            LayerKind::Dense { in_dim, out_dim } => (in_dim, out_dim),
        }
    }

    /// Output shape for a given input, validating the layer against it.
    pub fn output_shape(&self, index: usize, input: Shape) -> Result<Shape, NnError> {
        let config = |message: String| NnError::Config {
            layer: index,
            message,
        };
        match self.kind {
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return Err(config("channel counts must be positive".into()));
                }
                if kernel == 0 || stride == 0 {
                    return Err(config("kernel size and stride must be at least 1".into()));
                }
                if input.channels != in_channels {
                    return Err(config(format!(
                        "conv expects {in_channels} input channels, got {}",
                        input.channels
                    )));
                }
                if input.height < kernel || input.width < kernel {
                    return Err(config(format!(
                        "kernel {kernel} does not fit input {}x{}",
                        input.height, input.width
                    )));
                }
                Ok(Shape::new(
                    out_channels,
                    (input.height - kernel) / stride + 1,
                    (input.width - kernel) / stride + 1,
                ))
            }
            LayerKind::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return Err(config("dimensions must be positive".into()));
                }
                if input.len() != in_dim {
                    return Err(config(format!(
                        "fully-connected layer expects {in_dim} inputs, got {} ({input})",
                        input.len()
                    )));
                }
                Ok(Shape::vector(out_dim))
            }
        }
    }
}

/// Flattened network parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub values: Vec<f32>,
}

/// Gradient of a scalar loss with respect to every entry of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradSet {
    pub values: Vec<f32>,
}

impl GradSet {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &GradSet) -> Result<(), NnError> {
        if other.len() != self.len() {
            return Err(NnError::GradShape {
                expected: self.len(),
                found: other.len(),
            });
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += *b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f32) {
        self.values.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f32 {
        self.values.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Dense tensor with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: Shape::vector(data.len()),
            data,
        }
    }
}

/// Activation record of one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    generation: u64,
    /// im2col matrix for conv layers, raw input for fully-connected layers.
    saved: Vec<Vec<f32>>,
    outputs: Vec<Vec<f32>>,
}

impl Tape {
    pub fn output(&self) -> &[f32] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Post-activation output of layer `i`.
    pub fn layer_output(&self, i: usize) -> &[f32] {
        &self.outputs[i]
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// A chain of layers together with its parameters.
#[derive(Clone, Debug)]
pub struct Network {
    input: Shape,
    layers: Vec<LayerSpec>,
    /// `shapes[i]` is the input of layer `i`; the last entry is the output.
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    params: ParamSet,
    generation: u64,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.input == other.input && self.layers == other.layers && self.params == other.params
    }
}

impl Network {
    /// Builds a network with all parameters set to zero.
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Config {
                layer: 0,
                message: "network needs at least one layer".into(),
            });
        }
        let mut shapes = vec![input];
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for (i, layer) in layers.iter().enumerate() {
            let out = layer.output_shape(i, *shapes.last().unwrap())?;
            shapes.push(out);
            offsets.push(total);
            let (w, b) = layer.param_counts();
            total += w + b;
        }
        offsets.push(total);
        Ok(Self {
            input,
            layers,
            shapes,
            offsets,
            params: ParamSet {
                values: vec![0.0; total],
            },
            generation: next_generation(),
        })
    }

    pub fn with_params(input: Shape, layers: Vec<LayerSpec>, params: ParamSet) -> Result<Self, NnError> {
        let mut net = Self::new(input, layers)?;
        net.set_params(params)?;
        Ok(net)
    }

    /// Uniform Glorot initialization, `r = sqrt(6 / (fan_in + fan_out))`; biases zero.
    pub fn init_glorot<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for i in 0..self.layers.len() {
            let (fan_in, fan_out) = self.layers[i].fans();
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
            let (w, b) = self.layers[i].param_counts();
            let start = self.offsets[i];
            for v in &mut self.params.values[start..start + w] {
                *v = rng.random_range(-r..=r);
            }
            self.params.values[start + w..start + w + b].fill(0.0);
        }
        self.generation = next_generation();
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        *self.shapes.last().unwrap()
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values.len()
    }

    /// Offset of layer `i` in the flattened parameter view.
    pub fn layer_offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// (weights, bias) slices of layer `i`.
    pub fn layer_params(&self, i: usize) -> (&[f32], &[f32]) {
        let (w, _) = self.layers[i].param_counts();
        let start = self.offsets[i];
        let end = self.offsets[i + 1];
        (&self.params.values[start..start + w], &self.params.values[start + w..end])
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<(), NnError> {
        if params.values.len() != self.param_count() {
            return Err(NnError::GradShape {
                expected: self.param_count(),
                found: params.values.len(),
            });
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("parameters"));
        }
        self.params = params;
        self.generation = next_generation();
        Ok(())
    }

    pub fn zero_grads(&self) -> GradSet {
        GradSet::zeros(self.param_count())
    }

    /// Plain SGD update in place.
    pub fn sgd_update(&mut self, grads: &GradSet, lr: f32) -> Result<(), NnError> {
        let updated = sgd_step(&self.params, grads, lr)?;
        self.params = updated;
        self.generation = next_generation();
        Ok(())
    }

    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Tape), NnError> {
        self.forward_slice(&input.data)
    }

    /// Forward pass over a flat input buffer laid out as [`Self::input_shape`].
    pub fn forward_slice(&self, input: &[f32]) -> Result<(Tensor, Tape), NnError> {
        if input.len() != self.input.len() {
            return Err(NnError::Shape {
                layer: 0,
                expected: self.input.len(),
                shape: self.input.to_string(),
                found: input.len(),
            });
        }
        let mut saved = Vec::with_capacity(self.layers.len());
        let mut outputs: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let x: &[f32] = if i == 0 { input } else { &outputs[i - 1] };
            let (w, b) = self.layer_params(i);
            let (mut out, keep) = match layer.kind {
                LayerKind::Conv { kernel, stride, .. } => {
                    let out_shape = self.shapes[i + 1];
                    let cols = kernels::im2col(x, self.shapes[i], kernel, stride, out_shape);
                    let out = kernels::conv_forward(&cols, w, b, out_shape);
                    (out, cols)
                }
                LayerKind::Dense { .. } => (kernels::dense_forward(x, w, b), x.to_vec()),
            };
            layer.activation.apply(&mut out);
            saved.push(keep);
            outputs.push(out);
        }
        let tape = Tape {
            generation: self.generation,
            saved,
            outputs,
        };
        let output = Tensor::new(self.output_shape(), tape.output().to_vec());
        Ok((output, tape))
    }

    /// Convenience forward without keeping the tape.
    pub fn predict(&self, input: &[f32]) -> Result<Vec<f32>, NnError> {
        self.forward_slice(input).map(|(out, _)| out.data)
    }

    /// Backpropagate `upstream` (dL/d output) through the recorded pass.
    ///
    /// Returns parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, tape: &Tape, upstream: &[f32]) -> Result<(GradSet, Tensor), NnError> {
        let mut grads = self.zero_grads();
        let dx = self.backward_into(tape, upstream, &mut grads, true)?;
        Ok((grads, Tensor::new(self.input, dx.unwrap_or_default())))
    }

    /// Accumulating variant of [`Self::backward`]; skips the input gradient
    /// unless `want_input_grad`.
    pub fn backward_into(
        &self,
        tape: &Tape,
        upstream: &[f32],
        grads: &mut GradSet,
        want_input_grad: bool,
    ) -> Result<Option<Vec<f32>>, NnError> {
        if tape.generation != self.generation || tape.outputs.len() != self.layers.len() {
            return Err(NnError::StaleTape);
        }
        let out_len = self.output_shape().len();
        if upstream.len() != out_len {
            return Err(NnError::UpstreamShape {
                expected: out_len,
                found: upstream.len(),
            });
        }
        if grads.len() != self.param_count() {
            return Err(NnError::GradShape {
                expected: self.param_count(),
                found: grads.len(),
            });
        }
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            layer.activation.backprop(&tape.outputs[i], &mut delta);
            let (w, _) = self.layer_params(i);
            let (nw, _) = layer.param_counts();
            let start = self.offsets[i];
            let end = self.offsets[i + 1];
            let (gw, gb) = grads.values[start..end].split_at_mut(nw);
            let need_dx = i > 0 || want_input_grad;
            let dx = match layer.kind {
                LayerKind::Conv { kernel, stride, .. } => {
                    let out_shape = self.shapes[i + 1];
                    kernels::conv_backward_params(&tape.saved[i], &delta, out_shape, gw, gb);
                    need_dx.then(|| {
                        let dcols = kernels::conv_backward_cols(w, &delta, out_shape, tape.saved[i].len());
                        kernels::col2im(&dcols, self.shapes[i], kernel, stride, out_shape)
                    })
                }
                LayerKind::Dense { .. } => {
                    kernels::dense_backward_params(&tape.saved[i], &delta, gw, gb);
                    need_dx.then(|| kernels::dense_backward_input(w, &delta, tape.saved[i].len()))
                }
            };
            match dx {
                Some(dx) => delta = dx,
                None => return Ok(None),
            }
        }
        Ok(Some(delta))
    }
}

/// `params - lr * grads`, element-wise.
pub fn sgd_step(params: &ParamSet, grads: &GradSet, lr: f32) -> Result<ParamSet, NnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NnError::LearningRate(lr));
    }
    if grads.len() != params.values.len() {
        return Err(NnError::GradShape {
            expected: params.values.len(),
            found: grads.len(),
        });
    }
    if !grads.is_finite() {
        return Err(NnError::NonFinite("gradients"));
    }
    let values: Vec<f32> = params
        .values
        .iter()
        .zip(&grads.values)
        .map(|(p, g)| p - lr * g)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(NnError::NonFinite("updated parameters"));
    }
    Ok(ParamSet { values })
}
