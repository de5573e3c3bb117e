use rand::Rng;

use crate::error::{contract, Result};

/// Dense row-major `f32` array (last extent fastest) with an optional
/// gradient buffer of the same length.
///
/// Volumes over a grid are stored as `[C, nz, ny, nx]` so that the spatial
/// part of the flat index coincides with the grid's flat voxel index.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n], grad: None, requires_grad: false }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return contract(format!("shape {shape:?} needs {n} values, got {}", data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data, grad: None, requires_grad: false })
    }

    /// Entries drawn uniformly from `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f32, rng: &mut impl Rng) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of everything after the leading (channel) extent.
    pub fn inner_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Slice of channel `c` of a channel-first tensor.
    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.inner_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.inner_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return contract(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f32]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        let buf = self.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (b, x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn l2(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenates channel-first tensors with identical trailing extents.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| crate::Error::Contract("nothing to concatenate".into()))?;
        let tail = &first.shape[1..];
        let mut channels = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return contract(format!("cannot concatenate {:?} with {:?}", first.shape, p.shape));
            }
            channels += p.shape[0];
        }
        let mut shape = vec![channels];
        shape.extend_from_slice(tail);
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(&shape, data)
    }

    /// Splits a channel-first tensor into pieces with the given channel counts.
    pub fn split_channels(&self, counts: &[usize]) -> Result<Vec<Tensor>> {
        if counts.iter().sum::<usize>() != self.shape[0] {
            return contract(format!("split {counts:?} does not cover {} channels", self.shape[0]));
        }
        let n = self.inner_len();
        let mut out = Vec::with_capacity(counts.len());
        let mut c0 = 0;
        for &c in counts {
            let mut shape = vec![c];
            shape.extend_from_slice(&self.shape[1..]);
            out.push(Tensor::from_vec(&shape, self.data[c0 * n..(c0 + c) * n].to_vec())?);
            c0 += c;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_contract() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.channel(1), &[3.0, 4.0, 5.0]);
        assert!(t.clone().reshaped(&[3, 3]).is_err());
        assert_eq!(t.clone().reshaped(&[3, 2]).unwrap().shape, vec![3, 2]);
    }

    #[test]
    fn concat_then_split() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape, vec![3, 2]);
        let parts = c.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        assert!(Tensor::concat_channels(&[&a, &Tensor::zeros(&[1, 3])]).is_err());
    }

    #[test]
    fn gradient_accumulates() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 3.0, 4.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    }
}
