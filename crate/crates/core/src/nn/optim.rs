use super::{Module, Parameter};
use crate::error::{Error, Result};

/// Stochastic gradient descent with classic momentum:
/// `v ← μ·v + g`, `w ← w − lr·v`.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    /// Rescales the global gradient to at most this L2 norm.
    pub clip_norm: Option<f32>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Self { lr, momentum, clip_norm: None }
    }

    pub fn with_clip(mut self, max_norm: f32) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    /// Updates every trainable parameter of `module` from its gradient.
    /// A non-finite gradient aborts before anything is modified.
    pub fn step(&self, module: &mut dyn Module) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Contract(format!("learning rate must be positive, got {}", self.lr)));
        }
        let mut bad: Option<String> = None;
        let mut sq = 0.0f64;
        module.visit(&mut |p| {
            if p.trainable && bad.is_none() {
                if p.grad.iter().any(|g| !g.is_finite()) {
                    bad = Some(p.name.clone());
                }
                sq += p.grad.iter().map(|&g| (g as f64) * (g as f64)).sum::<f64>();
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite { name, detail: "gradient contains NaN or infinity".into() });
        }
        let scale = match self.clip_norm {
            Some(c) if sq.sqrt() > c as f64 => (c as f64 / sq.sqrt()) as f32,
            _ => 1.0,
        };
        module.visit_mut(&mut |p| {
            if p.trainable {
                update(p, self.lr, self.momentum, scale);
            }
        });
        Ok(())
    }
}

fn update(p: &mut Parameter, lr: f32, momentum: f32, scale: f32) {
    for ((w, v), g) in p.value.data.iter_mut().zip(&mut p.velocity).zip(&p.grad) {
        *v = momentum * *v + scale * g;
        *w -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    struct Scalar(Parameter);

    impl Module for Scalar {
        fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
            f(&self.0)
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
            f(&mut self.0)
        }
    }

    fn scalar(v: f32) -> Scalar {
        Scalar(Parameter::new("w", Tensor::full(&[1], v)))
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut m = scalar(3.0);
        Sgd::new(0.1, 0.9).step(&mut m).unwrap();
        assert_eq!(m.0.value.data[0], 3.0);
    }

    #[test]
    fn plain_step() {
        let mut m = scalar(0.0);
        m.0.grad[0] = 1.0;
        Sgd::new(0.1, 0.0).step(&mut m).unwrap();
        assert!((m.0.value.data[0] + 0.1).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps() {
        // v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19 = -0.29
        let mut m = scalar(0.0);
        let opt = Sgd::new(0.1, 0.9);
        for _ in 0..2 {
            m.0.grad[0] = 1.0;
            opt.step(&mut m).unwrap();
        }
        assert!((m.0.value.data[0] + 0.29).abs() < 1e-6);
    }

    #[test]
    fn nan_names_parameter() {
        let mut m = scalar(0.0);
        m.0.grad[0] = f32::NAN;
        match Sgd::new(0.1, 0.0).step(&mut m) {
            Err(Error::NonFinite { name, .. }) => assert_eq!(name, "w"),
            other => panic!("{other:?}"),
        }
        assert_eq!(m.0.value.data[0], 0.0);
    }

    #[test]
    fn clipping_bounds_update() {
        let mut m = scalar(0.0);
        m.0.grad[0] = 100.0;
        Sgd::new(1.0, 0.0).with_clip(1.0).step(&mut m).unwrap();
        assert!((m.0.value.data[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut m = Scalar(Parameter::buffer("running", Tensor::full(&[1], 2.0)));
        m.0.grad[0] = 1.0;
        Sgd::new(0.1, 0.0).step(&mut m).unwrap();
        assert_eq!(m.0.value.data[0], 2.0);
    }
}
