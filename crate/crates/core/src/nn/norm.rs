//! Batch normalization and its noise-conditioned variant.
//!
//! Inputs are channel-first `[C, ...]` with a batch of one scene, so the
//! per-channel statistics run over every spatial position.

use super::{Module, Parameter, BN_EPS};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Which statistics normalize the input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Mean and variance of the current input (training behaviour).
    BatchStats,
    /// Stored running estimates (classic evaluation behaviour).
    RunningStats,
}

/// Running mean / variance estimates, updated on every batch-stats pass.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], momentum: 0.1 }
    }
}

/// What the backward pass needs from a normalization forward.
#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    gamma: Vec<f32>,
    mode: NormMode,
    shape: Vec<usize>,
}

impl NormCache {
    pub fn normalized(&self) -> &[f32] {
        &self.xhat
    }
}

/// `γ · (x − μ) / √(δ² + ε) + β` per channel.
pub fn batch_norm(
    input: &Tensor,
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
    running: Option<&mut RunningStats>,
    mode: NormMode,
) -> Result<(Tensor, NormCache)> {
    if !(eps > 0.0) {
        return contract("epsilon must be positive");
    }
    if input.rank() < 1 {
        return contract("batch_norm needs a channel axis");
    }
    let c = input.shape[0];
    let n = input.inner_len();
    if n == 0 {
        return contract("batch_norm over a zero-element channel");
    }
    if gamma.len() != c || beta.len() != c {
        return contract(format!("expected {c} affine parameters, got {}/{}", gamma.len(), beta.len()));
    }
    let mut out = Tensor::zeros(&input.shape);
    let mut xhat = vec![0.0f32; input.len()];
    let mut inv_std = vec![0.0f32; c];
    let mut running = running;
    for ch in 0..c {
        let x = input.channel(ch);
        let (mean, var) = match mode {
            NormMode::BatchStats => {
                let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
                let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
                if let Some(rs) = running.as_deref_mut() {
                    let m = rs.momentum;
                    let unbiased = if n > 1 { var * n as f64 / (n - 1) as f64 } else { var };
                    rs.mean[ch] = (1.0 - m) * rs.mean[ch] + m * mean as f32;
                    rs.var[ch] = (1.0 - m) * rs.var[ch] + m * unbiased as f32;
                }
                (mean, var)
            }
            NormMode::RunningStats => {
                let rs = running
                    .as_deref()
                    .ok_or_else(|| crate::Error::Contract("running-stats mode without running stats".into()))?;
                (rs.mean[ch] as f64, rs.var[ch] as f64)
            }
        };
        let is = 1.0 / (var + eps as f64).sqrt();
        inv_std[ch] = is as f32;
        let xh = &mut xhat[ch * n..(ch + 1) * n];
        let o = out.channel_mut(ch);
        for i in 0..n {
            let v = ((x[i] as f64 - mean) * is) as f32;
            xh[i] = v;
            o[i] = gamma[ch] * v + beta[ch];
        }
    }
    Ok((out, NormCache { xhat, inv_std, gamma: gamma.to_vec(), mode, shape: input.shape.clone() }))
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batch_norm_backward(cache: &NormCache, grad_out: &Tensor) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    if grad_out.shape != cache.shape {
        return contract("grad_out shape does not match the normalized input");
    }
    let c = cache.shape[0];
    let n = grad_out.inner_len();
    let mut gin = Tensor::zeros(&cache.shape);
    let mut ggamma = vec![0.0f32; c];
    let mut gbeta = vec![0.0f32; c];
    for ch in 0..c {
        let g = grad_out.channel(ch);
        let xh = &cache.xhat[ch * n..(ch + 1) * n];
        let sum_g: f64 = g.iter().map(|&v| v as f64).sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum();
        ggamma[ch] = sum_gx as f32;
        gbeta[ch] = sum_g as f32;
        let scale = (cache.gamma[ch] * cache.inv_std[ch]) as f64;
        let gi = gin.channel_mut(ch);
        match cache.mode {
            NormMode::BatchStats => {
                let mg = sum_g / n as f64;
                let mgx = sum_gx / n as f64;
                for i in 0..n {
                    gi[i] = (scale * (g[i] as f64 - mg - xh[i] as f64 * mgx)) as f32;
                }
            }
            NormMode::RunningStats => {
                for i in 0..n {
                    gi[i] = (scale * g[i] as f64) as f32;
                }
            }
        }
    }
    Ok((gin, ggamma, gbeta))
}

/// Batch normalization with learned per-channel affine parameters.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub running: RunningStats,
    pub mode: NormMode,
    cache: Option<NormCache>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running: RunningStats::new(channels),
            mode: NormMode::BatchStats,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, cache) = batch_norm(x, &self.gamma.value.data, &self.beta.value.data, BN_EPS, Some(&mut self.running), self.mode)?;
        self.cache = Some(cache);
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let cache = self.cache.as_ref().ok_or_else(|| crate::Error::Contract("backward before forward".into()))?;
        let (gin, gg, gb) = batch_norm_backward(cache, grad_out)?;
        self.gamma.grad.iter_mut().zip(&gg).for_each(|(a, b)| *a += b);
        self.beta.grad.iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
        Ok(gin)
    }
}

impl Module for BatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Lookup table mapping a discrete noise level to per-channel `(γ, β)`.
/// Row `t` holds `γ` in its first `C` entries and `β` in the last `C`.
#[derive(Debug, Clone)]
pub struct NoiseEmbedding {
    pub table: Parameter,
    pub channels: usize,
}

impl NoiseEmbedding {
    /// Every level starts at `γ = 1, β = 0`.
    pub fn new(name: &str, levels: usize, channels: usize) -> Self {
        let mut table = Tensor::zeros(&[levels, 2 * channels]);
        for t in 0..levels {
            table.data[t * 2 * channels..t * 2 * channels + channels].fill(1.0);
        }
        Self { table: Parameter::new(format!("{name}.embed"), table), channels }
    }

    pub fn levels(&self) -> usize {
        self.table.value.shape[0]
    }

    /// `(γ, β)` rows for level `t`.
    pub fn lookup(&self, t: usize) -> Result<(&[f32], &[f32])> {
        if t >= self.levels() {
            return contract(format!("noise level {t} not in 0..{}", self.levels()));
        }
        let c = self.channels;
        let row = &self.table.value.data[t * 2 * c..(t + 1) * 2 * c];
        Ok((&row[..c], &row[c..]))
    }
}

/// Normalization whose affine parameters come from the noise level.
pub fn ada_bn(input: &Tensor, embed: &NoiseEmbedding, t: usize, eps: f32) -> Result<(Tensor, NormCache)> {
    if input.shape.first() != Some(&embed.channels) {
        return contract(format!(
            "embedding has {} channels, input has shape {:?}",
            embed.channels, input.shape
        ));
    }
    let (gamma, beta) = embed.lookup(t)?;
    batch_norm(input, gamma, beta, eps, None, NormMode::BatchStats)
}

/// Backward of [`ada_bn`]: accumulates into the embedding row of level `t`.
pub fn ada_bn_backward(cache: &NormCache, grad_out: &Tensor, embed: &mut NoiseEmbedding, t: usize) -> Result<Tensor> {
    embed.lookup(t)?;
    let (gin, gg, gb) = batch_norm_backward(cache, grad_out)?;
    let c = embed.channels;
    let row = &mut embed.table.grad[t * 2 * c..(t + 1) * 2 * c];
    for i in 0..c {
        row[i] += gg[i];
        row[c + i] += gb[i];
    }
    Ok(gin)
}

/// Layer form of [`ada_bn`].
#[derive(Debug, Clone)]
pub struct AdaBatchNorm {
    pub embed: NoiseEmbedding,
    cache: Option<(NormCache, usize)>,
}

impl AdaBatchNorm {
    pub fn new(name: &str, levels: usize, channels: usize) -> Self {
        Self { embed: NoiseEmbedding::new(name, levels, channels), cache: None }
    }

    pub fn forward(&mut self, x: &Tensor, t: usize) -> Result<Tensor> {
        let (y, cache) = ada_bn(x, &self.embed, t, BN_EPS)?;
        self.cache = Some((cache, t));
        Ok(y)
    }

    pub fn apply(&self, x: &Tensor, t: usize) -> Result<Tensor> {
        Ok(ada_bn(x, &self.embed, t, BN_EPS)?.0)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let (cache, t) = self.cache.as_ref().ok_or_else(|| crate::Error::Contract("backward before forward".into()))?;
        ada_bn_backward(cache, grad_out, &mut self.embed, *t)
    }
}

impl Module for AdaBatchNorm {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.embed.table);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.embed.table);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardized_input_is_fixed_point() {
        let x = Tensor::from_vec(&[1, 4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = batch_norm(&x, &[1.0], &[0.0], BN_EPS, None, NormMode::BatchStats).unwrap();
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(&[2, 10], 3.0, &mut rng);
        let (y, _) = batch_norm(&x, &[0.0, 0.0], &[0.25, -2.0], BN_EPS, None, NormMode::BatchStats).unwrap();
        assert!(y.channel(0).iter().all(|&v| v == 0.25));
        assert!(y.channel(1).iter().all(|&v| v == -2.0));
    }

    #[test]
    fn statistics_match_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x = Tensor::uniform(&[3, 2, 5, 7], 2.0, &mut rng);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v += (i / 70) as f32 * 1.5);
        let (y, _) = batch_norm(&x, &[1.0; 3], &[0.0; 3], BN_EPS, None, NormMode::BatchStats).unwrap();
        for c in 0..3 {
            let xs = x.channel(c);
            let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / 70.0;
            let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 70.0;
            for (i, &v) in y.channel(c).iter().enumerate() {
                let want = (xs[i] as f64 - mean) / (var + 1e-5).sqrt();
                assert!((v as f64 - want).abs() < 1e-5);
            }
            let ym = y.channel(c).iter().map(|&v| v as f64).sum::<f64>() / 70.0;
            let yv = y.channel(c).iter().map(|&v| (v as f64 - ym).powi(2)).sum::<f64>() / 70.0;
            assert!(ym.abs() < 1e-5);
            assert!((yv - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn running_stats_mode() {
        let mut rs = RunningStats::new(1);
        let x = Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        batch_norm(&x, &[1.0], &[0.0], BN_EPS, Some(&mut rs), NormMode::BatchStats).unwrap();
        assert!((rs.mean[0] - 0.25).abs() < 1e-6);
        let (y, _) = batch_norm(&x, &[1.0], &[0.0], BN_EPS, Some(&mut rs), NormMode::RunningStats).unwrap();
        let want = (1.0 - rs.mean[0]) / (rs.var[0] + 1e-5).sqrt();
        assert!((y.data[0] - want).abs() < 1e-6);
        assert!(batch_norm(&x, &[1.0], &[0.0], BN_EPS, None, NormMode::RunningStats).is_err());
    }

    #[test]
    fn empty_channel_is_contract_error() {
        let x = Tensor::zeros(&[2, 0]);
        assert!(batch_norm(&x, &[1.0; 2], &[0.0; 2], BN_EPS, None, NormMode::BatchStats).is_err());
    }

    #[test]
    fn ada_bn_identity_at_init_and_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[4, 3, 3, 3], 1.0, &mut rng);
        let mut emb = NoiseEmbedding::new("n", 4, 4);
        let (plain, _) = batch_norm(&x, &[1.0; 4], &[0.0; 4], BN_EPS, None, NormMode::BatchStats).unwrap();
        for t in 0..4 {
            let (y, _) = ada_bn(&x, &emb, t, BN_EPS).unwrap();
            let dev = y.data.iter().zip(&plain.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(dev < 1e-6);
        }
        emb.table.value.data[2 * 8] = 2.0;
        let (a, _) = ada_bn(&x, &emb, 1, BN_EPS).unwrap();
        let (b, _) = ada_bn(&x, &emb, 2, BN_EPS).unwrap();
        assert_ne!(a.data, b.data);
        assert!(ada_bn(&x, &emb, 4, BN_EPS).is_err());
        assert!(ada_bn(&Tensor::zeros(&[3, 2]), &emb, 0, BN_EPS).is_err());
    }
}
