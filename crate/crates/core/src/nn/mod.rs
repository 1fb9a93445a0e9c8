//! Dense feed-forward networks over a flat parameter vector.
//!
//! A network is described by a [`NetworkSpec`] and its parameters live in a
//! single [`WeightVector`]. The flattening order is fixed: layers in order,
//! and within a layer the weight matrix in row-major `(output, input)` order
//! followed by the biases. Every other module (partitions, sparse deltas, the
//! wire format) indexes into this layout.
//!
//! All protocol state is `f32`. The math in [`kernel`] is generic over the
//! float type so the same code can be checked in `f64` against finite
//! differences.

pub mod kernel;
mod serialize;

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::seed;
use crate::{Error, Result};

pub use kernel::{Real, Scratch, Trace};
pub use serialize::{decode_weights, encode_weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.input_dim * self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.output_dim
    }
}

/// Validated layer chain plus loss.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    loss: LossKind,
    offsets: Vec<usize>,
    param_count: usize,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, loss: LossKind) -> Result<Self> {
        let Some(last) = layers.last() else {
            return Err(Error::InvalidSpec("network has no layers".into()));
        };
        for (k, layer) in layers.iter().enumerate() {
            if layer.input_dim == 0 || layer.output_dim == 0 {
                return Err(Error::InvalidSpec(format!("layer {k} has a zero dimension")));
            }
            if layer.activation == Activation::Softmax && k + 1 != layers.len() {
                return Err(Error::InvalidSpec(format!(
                    "softmax is only allowed on the final layer (found on layer {k})"
                )));
            }
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim != pair[1].input_dim {
                return Err(Error::InvalidSpec(format!(
                    "layer {k} outputs {} values but layer {} expects {}",
                    pair[0].output_dim,
                    k + 1,
                    pair[1].input_dim
                )));
            }
        }
        match (loss, last.activation) {
            (LossKind::Mse, Activation::Identity) => {}
            (LossKind::CrossEntropy, Activation::Softmax) => {}
            (LossKind::Mse, _) => {
                return Err(Error::InvalidSpec(
                    "MSE loss requires an identity output layer".into(),
                ))
            }
            (LossKind::CrossEntropy, _) => {
                return Err(Error::InvalidSpec(
                    "cross-entropy loss requires a softmax output layer".into(),
                ))
            }
        }

        let mut offsets = Vec::with_capacity(layers.len());
        let mut param_count = 0;
        for layer in &layers {
            offsets.push(param_count);
            param_count += layer.param_count();
        }
        Ok(Self {
            layers,
            loss,
            offsets,
            param_count,
        })
    }

    /// Builds a chain from a list of widths: `dims[0]` inputs, `dims[last]`
    /// outputs, `hidden` on every inner layer and the output activation implied
    /// by `loss`.
    pub fn mlp(dims: &[usize], hidden: Activation, loss: LossKind) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidSpec("need at least input and output widths".into()));
        }
        let output_activation = match loss {
            LossKind::Mse => Activation::Identity,
            LossKind::CrossEntropy => Activation::Softmax,
        };
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, d)| {
                let act = if k + 1 == n { output_activation } else { hidden };
                LayerSpec::new(d[0], d[1], act)
            })
            .collect();
        Self::new(layers, loss)
    }

    /// The 1 → 16 → 16 → 16 → 1 tanh regressor used for sine tasks.
    pub fn sine_regressor() -> Self {
        Self::mlp(&[1, 16, 16, 16, 1], Activation::Tanh, LossKind::Mse)
            .expect("static spec is valid")
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim
    }

    /// Parameter range (weights then biases) of layer `k` in the flat layout.
    pub fn layer_range(&self, k: usize) -> Range<usize> {
        let start = self.offsets[k];
        start..start + self.layers[k].param_count()
    }

    pub(crate) fn offset(&self, k: usize) -> usize {
        self.offsets[k]
    }

    fn widest(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.input_dim.max(l.output_dim))
            .max()
            .unwrap_or(0)
    }
}

/// Flat model parameters in the canonical layout of some [`NetworkSpec`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightVector(Vec<f32>);

impl WeightVector {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn check_layout(&self, spec: &NetworkSpec) -> Result<()> {
        if self.len() != spec.param_count() {
            return Err(Error::Dimension {
                what: "weight vector",
                expected: spec.param_count(),
                actual: self.len(),
            });
        }
        Ok(())
    }
}

impl From<Vec<f32>> for WeightVector {
    fn from(v: Vec<f32>) -> Self {
        Self(v)
    }
}

/// One labelled example. Classification targets are one-hot vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Vec<f32>,
    pub target: Vec<f32>,
}

impl Sample {
    pub fn new(input: Vec<f32>, target: Vec<f32>) -> Self {
        Self { input, target }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.input.len() != spec.input_dim() {
            return Err(Error::Dimension {
                what: "sample input",
                expected: spec.input_dim(),
                actual: self.input.len(),
            });
        }
        if self.target.len() != spec.output_dim() {
            return Err(Error::Dimension {
                what: "sample target",
                expected: spec.output_dim(),
                actual: self.target.len(),
            });
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`limit = sqrt(6 / (fan_in + fan_out))` per layer)
/// and zero biases, deterministic in `seed`.
pub fn init_weights(spec: &NetworkSpec, seed: u64) -> WeightVector {
    let mut rng = seed::rng(seed, &[seed::domain::INIT]);
    init_weights_with(spec, &mut rng)
}

pub fn init_weights_with<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> WeightVector {
    let mut values = vec![0.0f32; spec.param_count()];
    for (k, layer) in spec.layers().iter().enumerate() {
        let limit = (6.0 / (layer.input_dim + layer.output_dim) as f32).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
        let start = spec.offset(k);
        for w in &mut values[start..start + layer.weight_count()] {
            *w = dist.sample(rng);
        }
    }
    WeightVector(values)
}

/// Forward pass returning the output and the per-layer activation trace.
pub fn forward(spec: &NetworkSpec, w: &WeightVector, x: &[f32]) -> Result<(Vec<f32>, Trace<f32>)> {
    w.check_layout(spec)?;
    if x.len() != spec.input_dim() {
        return Err(Error::Dimension {
            what: "input",
            expected: spec.input_dim(),
            actual: x.len(),
        });
    }
    let mut trace = Trace::new(spec);
    kernel::forward(spec, w.values(), x, &mut trace);
    Ok((trace.output().to_vec(), trace))
}

/// Loss and gradient for one sample. Coordinates where `trainable` is false
/// come back as exactly zero.
pub fn backward(
    spec: &NetworkSpec,
    w: &WeightVector,
    sample: &Sample,
    trainable: Option<&[bool]>,
) -> Result<(f32, WeightVector)> {
    w.check_layout(spec)?;
    sample.check(spec)?;
    check_mask(spec, trainable)?;
    let mut scratch = Scratch::new(spec);
    let loss = kernel::loss_and_gradient(
        spec,
        w.values(),
        &sample.input,
        &sample.target,
        trainable,
        &mut scratch,
    );
    Ok((loss, WeightVector(scratch.grad)))
}

/// Loss of the network on one sample, without the gradient.
pub fn loss(spec: &NetworkSpec, w: &WeightVector, sample: &Sample) -> Result<f32> {
    w.check_layout(spec)?;
    sample.check(spec)?;
    let mut trace = Trace::new(spec);
    kernel::forward(spec, w.values(), &sample.input, &mut trace);
    Ok(kernel::loss(spec.loss(), &trace, &sample.target))
}

/// `w - beta * grad`, elementwise.
pub fn sgd_step(w: &WeightVector, grad: &WeightVector, beta: f32) -> Result<WeightVector> {
    if w.len() != grad.len() {
        return Err(Error::Dimension {
            what: "gradient",
            expected: w.len(),
            actual: grad.len(),
        });
    }
    if !(beta > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {beta}")));
    }
    let mut out = w.clone();
    kernel::apply_step(out.values_mut(), grad.values(), beta);
    if !out.is_finite() {
        return Err(Error::NonFinite("sgd_step"));
    }
    Ok(out)
}

/// One online SGD step on a single sample, in place. Returns the loss seen
/// before the step.
pub fn train_step(
    spec: &NetworkSpec,
    w: &mut WeightVector,
    sample: &Sample,
    trainable: Option<&[bool]>,
    beta: f32,
    scratch: &mut Scratch<f32>,
) -> Result<f32> {
    sample.check(spec)?;
    let loss = kernel::loss_and_gradient(
        spec,
        w.values(),
        &sample.input,
        &sample.target,
        trainable,
        scratch,
    );
    kernel::apply_step(w.values_mut(), &scratch.grad, beta);
    if !loss.is_finite() || !w.is_finite() {
        return Err(Error::NonFinite("train_step"));
    }
    Ok(loss)
}

fn check_mask(spec: &NetworkSpec, trainable: Option<&[bool]>) -> Result<()> {
    match trainable {
        Some(m) if m.len() != spec.param_count() => Err(Error::Dimension {
            what: "mask",
            expected: spec.param_count(),
            actual: m.len(),
        }),
        _ => Ok(()),
    }
}

/// Index of the largest output, for classification accuracy.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
