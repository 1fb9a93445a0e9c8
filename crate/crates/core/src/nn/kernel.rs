//! Forward and backward passes over raw parameter slices.
//!
//! These functions assume shapes were validated by the caller and panic on
//! misuse. They are generic over the float type: protocol code runs them in
//! `f32`, gradient checks run them in `f64`.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use super::{Activation, LossKind, NetworkSpec};

pub trait Real: Float + FromPrimitive + Sum + Debug + Send + Sync + 'static {
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }
}

impl<T> Real for T where T: Float + FromPrimitive + Sum + Debug + Send + Sync + 'static {}

/// Per-layer pre- and post-activation values from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// `acts[0]` is the input, `acts[k + 1]` the output of layer `k`.
    acts: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Real> Trace<T> {
    pub fn new(spec: &NetworkSpec) -> Self {
        let mut acts = vec![vec![T::zero(); spec.input_dim()]];
        let mut pre = Vec::with_capacity(spec.layers().len());
        for layer in spec.layers() {
            acts.push(vec![T::zero(); layer.output_dim]);
            pre.push(vec![T::zero(); layer.output_dim]);
        }
        Self { acts, pre }
    }

    pub fn input(&self) -> &[T] {
        &self.acts[0]
    }

    pub fn output(&self) -> &[T] {
        &self.acts[self.acts.len() - 1]
    }

    pub fn pre_activation(&self, layer: usize) -> &[T] {
        &self.pre[layer]
    }

    pub fn post_activation(&self, layer: usize) -> &[T] {
        &self.acts[layer + 1]
    }
}

/// Reusable buffers for the training hot path.
#[derive(Debug, Clone)]
pub struct Scratch<T> {
    pub(crate) trace: Trace<T>,
    pub(crate) grad: Vec<T>,
    delta: Vec<T>,
    delta_prev: Vec<T>,
}

impl<T: Real> Scratch<T> {
    pub fn new(spec: &NetworkSpec) -> Self {
        let widest = spec.widest();
        Self {
            trace: Trace::new(spec),
            grad: vec![T::zero(); spec.param_count()],
            delta: vec![T::zero(); widest],
            delta_prev: vec![T::zero(); widest],
        }
    }

    pub fn gradient(&self) -> &[T] {
        &self.grad
    }

    pub fn trace(&self) -> &Trace<T> {
        &self.trace
    }
}

pub fn forward<T: Real>(spec: &NetworkSpec, w: &[T], x: &[T], trace: &mut Trace<T>) {
    assert_eq!(w.len(), spec.param_count());
    assert_eq!(x.len(), spec.input_dim());
    trace.acts[0].copy_from_slice(x);
    for (k, layer) in spec.layers().iter().enumerate() {
        let off = spec.offset(k);
        let (weights, biases) = w[off..off + layer.param_count()].split_at(layer.weight_count());
        let (before, after) = trace.acts.split_at_mut(k + 1);
        let input = &before[k];
        let out = &mut after[0];
        let z = &mut trace.pre[k];
        for o in 0..layer.output_dim {
            let row = &weights[o * layer.input_dim..(o + 1) * layer.input_dim];
            let mut acc = biases[o];
            for (wi, xi) in row.iter().zip(input.iter()) {
                acc = acc + *wi * *xi;
            }
            z[o] = acc;
        }
        activate(layer.activation, z, out);
    }
}

fn activate<T: Real>(act: Activation, z: &[T], out: &mut [T]) {
    match act {
        Activation::Identity => out.copy_from_slice(z),
        Activation::Tanh => {
            for (o, &v) in out.iter_mut().zip(z) {
                *o = v.tanh();
            }
        }
        Activation::Relu => {
            for (o, &v) in out.iter_mut().zip(z) {
                *o = if v > T::zero() { v } else { T::zero() };
            }
        }
        Activation::Softmax => {
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (o, &v) in out.iter_mut().zip(z) {
                *o = (v - max).exp();
                sum = sum + *o;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
    }
}

/// Loss of the last forward pass recorded in `trace`.
///
/// MSE is averaged over output dimensions. Cross-entropy is computed from the
/// logits with a log-sum-exp so it stays finite for saturated outputs.
pub fn loss<T: Real>(loss: LossKind, trace: &Trace<T>, target: &[T]) -> T {
    match loss {
        LossKind::Mse => {
            let out = trace.output();
            let n = T::from_usize(out.len()).expect("small");
            out.iter()
                .zip(target)
                .map(|(&y, &t)| (y - t) * (y - t))
                .sum::<T>()
                / n
        }
        LossKind::CrossEntropy => {
            let z = trace.pre.last().expect("non-empty network");
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            z.iter()
                .zip(target)
                .map(|(&zi, &ti)| ti * (lse - zi))
                .sum()
        }
    }
}

/// Forward pass, loss, and full backward pass for one sample. The gradient is
/// left in `scratch.grad`; coordinates with `trainable[i] == false` are set to
/// exactly zero.
pub fn loss_and_gradient<T: Real>(
    spec: &NetworkSpec,
    w: &[T],
    input: &[T],
    target: &[T],
    trainable: Option<&[bool]>,
    scratch: &mut Scratch<T>,
) -> T {
    forward(spec, w, input, &mut scratch.trace);
    let value = loss(spec.loss(), &scratch.trace, target);

    let layers = spec.layers();
    let n = layers.len();
    let out_dim = spec.output_dim();
    let y = scratch.trace.output();
    let delta = &mut scratch.delta;
    match spec.loss() {
        LossKind::Mse => {
            let scale = T::of(2.0) / T::from_usize(out_dim).expect("small");
            for o in 0..out_dim {
                delta[o] = scale * (y[o] - target[o]);
            }
        }
        LossKind::CrossEntropy => {
            let mass: T = target.iter().copied().sum();
            for o in 0..out_dim {
                delta[o] = y[o] * mass - target[o];
            }
        }
    }

    for k in (0..n).rev() {
        let layer = layers[k];
        let off = spec.offset(k);
        let a_prev = &scratch.trace.acts[k];
        let (gw, gb) = scratch.grad[off..off + layer.param_count()].split_at_mut(layer.weight_count());
        for o in 0..layer.output_dim {
            let d = scratch.delta[o];
            gb[o] = d;
            for (g, &a) in gw[o * layer.input_dim..(o + 1) * layer.input_dim]
                .iter_mut()
                .zip(a_prev)
            {
                *g = d * a;
            }
        }
        if k == 0 {
            break;
        }
        let weights = &w[off..off + layer.weight_count()];
        let prev = &mut scratch.delta_prev[..layer.input_dim];
        prev.iter_mut().for_each(|p| *p = T::zero());
        for o in 0..layer.output_dim {
            let d = scratch.delta[o];
            for (p, &wv) in prev
                .iter_mut()
                .zip(&weights[o * layer.input_dim..(o + 1) * layer.input_dim])
            {
                *p = *p + wv * d;
            }
        }
        let below = layers[k - 1].activation;
        let z = &scratch.trace.pre[k - 1];
        let a = &scratch.trace.acts[k];
        for i in 0..layer.input_dim {
            let slope = match below {
                Activation::Identity => T::one(),
                Activation::Tanh => T::one() - a[i] * a[i],
                Activation::Relu => {
                    if z[i] > T::zero() {
                        T::one()
                    } else {
                        T::zero()
                    }
                }
                Activation::Softmax => unreachable!("softmax only on the output layer"),
            };
            prev[i] = prev[i] * slope;
        }
        std::mem::swap(&mut scratch.delta, &mut scratch.delta_prev);
    }

    if let Some(mask) = trainable {
        for (g, &keep) in scratch.grad.iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
    }
    value
}

pub fn apply_step<T: Real>(w: &mut [T], grad: &[T], beta: T) {
    for (wi, &gi) in w.iter_mut().zip(grad) {
        *wi = *wi - beta * gi;
    }
}
