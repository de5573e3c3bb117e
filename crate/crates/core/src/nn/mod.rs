//! Minimal differentiable-network substrate.
//!
//! There is no tape: every op comes as an explicit forward function plus a
//! backward function that consumes the forward's inputs (or a cache) and the
//! upstream gradient. Layers wrap the functional ops, own their
//! [`Parameter`]s and cache what their backward pass needs.

pub mod conv;
pub mod gradcheck;
pub mod loss;
pub mod norm;
pub mod optim;
pub mod suite;

use crate::tensor::Tensor;

pub use conv::{Conv3d, ConvTranspose3d};
pub use norm::{AdaBatchNorm, BatchNorm, NoiseEmbedding, NormMode};
pub use optim::Sgd;

/// Variance floor used by every normalization in the crate.
pub const BN_EPS: f32 = 1e-5;

/// A named tensor owned by a network, with its gradient and optimizer state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f32>,
    /// Momentum buffer.
    pub velocity: Vec<f32>,
    /// Buffers such as running statistics are saved with the network but
    /// never touched by the optimizer.
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let n = value.len();
        Self { name: name.into(), value, grad: vec![0.0; n], velocity: vec![0.0; n], trainable: true }
    }

    pub fn buffer(name: impl Into<String>, value: Tensor) -> Self {
        Self { trainable: false, ..Self::new(name, value) }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn grad_l2(&self) -> f64 {
        self.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt()
    }
}

/// Anything that owns parameters.
pub trait Module {
    fn visit(&self, f: &mut dyn FnMut(&Parameter));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter));

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |p| p.zero_grad());
    }

    fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable {
                n += p.value.len()
            }
        });
        n
    }
}

/// Elementwise `max(x, 0)`.
pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.grad = None;
    for v in &mut y.data {
        *v = v.max(0.0);
    }
    y
}

/// Backward of [`relu`] given its *output*.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &y) in g.data.iter_mut().zip(&output.data) {
        if y <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

/// Softmax over the leading (channel) axis of a `[C, ...]` tensor.
pub fn softmax_channels(logits: &Tensor) -> Tensor {
    let c = logits.shape[0];
    let n = logits.inner_len();
    let mut out = Tensor::zeros(&logits.shape);
    for i in 0..n {
        let mut m = f32::NEG_INFINITY;
        for k in 0..c {
            m = m.max(logits.data[k * n + i]);
        }
        let mut s = 0.0f32;
        for k in 0..c {
            let e = (logits.data[k * n + i] - m).exp();
            out.data[k * n + i] = e;
            s += e;
        }
        for k in 0..c {
            out.data[k * n + i] /= s;
        }
    }
    out
}

/// Pulls a gradient with respect to softmax probabilities back to logits.
pub fn softmax_channels_backward(probs: &Tensor, grad_probs: &Tensor) -> Tensor {
    let c = probs.shape[0];
    let n = probs.inner_len();
    let mut g = Tensor::zeros(&probs.shape);
    for i in 0..n {
        let mut dot = 0.0f32;
        for k in 0..c {
            dot += probs.data[k * n + i] * grad_probs.data[k * n + i];
        }
        for k in 0..c {
            let p = probs.data[k * n + i];
            g.data[k * n + i] = p * (grad_probs.data[k * n + i] - dot);
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_columns_sum_to_one() {
        let t = Tensor::from_vec(&[3, 2], vec![1.0, -2.0, 0.5, 0.0, 3.0, 100.0]).unwrap();
        let p = softmax_channels(&t);
        for i in 0..2 {
            let s: f32 = (0..3).map(|k| p.data[k * 2 + i]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn relu_masks_gradient() {
        let x = Tensor::from_vec(&[4], vec![-1.0, 0.5, 0.0, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data, vec![0.0, 0.5, 0.0, 2.0]);
        let g = relu_backward(&y, &Tensor::full(&[4], 1.0));
        assert_eq!(g.data, vec![0.0, 1.0, 0.0, 1.0]);
    }
}
