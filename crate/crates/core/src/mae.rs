//! Stage 2: denoising completion network.
//!
//! Visible-voxel labels are perturbed geometrically ([`add_noise`]), encoded
//! together with the stage-1 context features, and pushed through a small
//! 3D U-Net whose every normalization is conditioned on the noise level.
//! The output covers the whole grid.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::grid::{CameraModel, VoxelGrid, EMPTY, IGNORE};
use crate::nn::loss::{affinity_loss, class_weights_from_counts, weighted_ce_loss, AffinityMode};
use crate::nn::{
    relu, relu_backward, softmax_channels, softmax_channels_backward, AdaBatchNorm, Conv3d, ConvTranspose3d, Module,
    Parameter, Sgd,
};
use crate::stage1::{restore_params, LossParts, TrainOptions, TrainTrace};
use crate::tensor::Tensor;
use crate::visibility::{VisClass, VisibilityMask};

/// Geometric noise ranges (voxels) and the discrete noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub r_h: usize,
    pub r_d: usize,
    /// Sampling weight of every level `t = 0..weights.len()`.
    pub weights: Vec<f64>,
}

impl NoiseSpec {
    /// Four equally likely levels.
    pub fn new(r_h: usize, r_d: usize) -> Self {
        Self { r_h, r_d, weights: vec![1.0; 4] }
    }

    pub fn levels(&self) -> usize {
        self.weights.len()
    }

    /// `(r_h(t), r_d(t))`: level `t` scales the maxima by `t / (levels - 1)`.
    pub fn ranges(&self, t: usize) -> Result<(usize, usize)> {
        let l = self.levels();
        if t >= l {
            return contract(format!("noise level {t} not in 0..{l}"));
        }
        if l == 1 {
            return Ok((self.r_h, self.r_d));
        }
        let f = t as f64 / (l - 1) as f64;
        Ok(((self.r_h as f64 * f).round() as usize, (self.r_d as f64 * f).round() as usize))
    }

    pub fn highest_level(&self) -> usize {
        self.levels() - 1
    }
}

/// Grid axis (0 = x, 1 = y) closest to the camera's horizontal viewing
/// direction; the other horizontal axis is the "horizontal" noise axis.
pub fn depth_axis(camera: &CameraModel) -> usize {
    let f = camera.forward_world();
    if f[0].abs() >= f[1].abs() {
        0
    } else {
        1
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform integer in `[-r, r]` from a hash value.
#[inline]
fn offset(hash: u64, r: usize) -> i64 {
    (hash % (2 * r as u64 + 1)) as i64 - r as i64
}

/// Replaces every visible voxel's label with that of a random neighbor
/// within `r_h(t)` voxels along the horizontal axis and `r_d(t)` along the
/// depth axis (never vertically), clamped at the borders. Only visible
/// sources are copied; a draw that lands on a non-visible voxel leaves the
/// label as it was. Non-visible voxels are never modified.
///
/// Randomness is a counter-based hash of `(seed, voxel)`, so the result does
/// not depend on iteration order.
pub fn add_noise(
    pred: &VoxelGrid,
    mask: &VisibilityMask,
    spec: &NoiseSpec,
    t: usize,
    seed: u64,
    depth_axis: usize,
) -> Result<VoxelGrid> {
    if pred.meta != mask.meta {
        return contract("prediction and visibility mask differ in geometry");
    }
    if depth_axis > 1 {
        return contract("depth axis must be horizontal (0 or 1)");
    }
    let (rh, rd) = spec.ranges(t)?;
    let mut out = pred.clone();
    if rh == 0 && rd == 0 {
        return Ok(out);
    }
    let meta = pred.meta;
    let h_axis = 1 - depth_axis;
    let key = splitmix64(seed ^ 0x5EED_0F_A0D_D5EED);
    for i in 0..meta.num_voxels() {
        if mask.classes[i] != VisClass::Visible {
            continue;
        }
        let a = splitmix64(key ^ (2 * i as u64));
        let b = splitmix64(key ^ (2 * i as u64 + 1));
        let mut idx = meta.unflat(i);
        for (axis, delta) in [(h_axis, offset(a, rh)), (depth_axis, offset(b, rd))] {
            let v = (idx[axis] as i64 + delta).clamp(0, meta.dims[axis] as i64 - 1);
            idx[axis] = v as usize;
        }
        let src = meta.flat(idx);
        if mask.classes[src] == VisClass::Visible {
            out.labels[i] = pred.labels[src];
        }
    }
    Ok(out)
}

/// Channel widths of the denoising U-Net.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaeConfig {
    pub num_classes: usize,
    /// Channels of the stage-1 context features (0 disables them).
    pub context_channels: usize,
    pub embed: usize,
    pub widths: [usize; 3],
    pub levels: usize,
}

impl Default for MaeConfig {
    fn default() -> Self {
        Self { num_classes: 6, context_channels: 16, embed: 16, widths: [16, 32, 32], levels: 4 }
    }
}

impl MaeConfig {
    /// One-hot labels plus the visibility channel.
    pub fn input_channels(&self) -> usize {
        self.num_classes + 2
    }
}

/// Convolution, noise-conditioned normalization, ReLU.
#[derive(Debug, Clone)]
pub struct AdaBlock {
    pub conv: Conv3d,
    pub norm: AdaBatchNorm,
    out: Option<Tensor>,
}

impl AdaBlock {
    fn new(conv: Conv3d, name: &str, levels: usize) -> Self {
        let c = conv.out_channels();
        Self { conv, norm: AdaBatchNorm::new(name, levels, c), out: None }
    }

    fn forward(&mut self, x: &Tensor, t: usize) -> Result<Tensor> {
        let y = relu(&self.norm.forward(&self.conv.forward(x)?, t)?);
        self.out = Some(y.clone());
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor, want_input: bool) -> Result<Option<Tensor>> {
        let out = self.out.as_ref().ok_or_else(|| Error::Contract("backward before forward".into()))?;
        let g = relu_backward(out, g);
        let g = self.norm.backward(&g)?;
        self.conv.backward(&g, want_input)
    }
}

impl Module for AdaBlock {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.conv.visit(f);
        self.norm.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv.visit_mut(f);
        self.norm.visit_mut(f);
    }
}

/// Noise-conditioned 3D U-Net over one-hot visible labels and context.
#[derive(Debug, Clone)]
pub struct MaeNet {
    pub cfg: MaeConfig,
    /// 2x2x2 stride-2 patch embedding of the label volume.
    pub patch: Conv3d,
    /// Same embedding for the context features.
    pub ctx_patch: Option<Conv3d>,
    pub enc1: AdaBlock,
    pub down1: AdaBlock,
    pub enc2: AdaBlock,
    pub down2: AdaBlock,
    pub mid: AdaBlock,
    pub up2: ConvTranspose3d,
    pub dec2: AdaBlock,
    pub up1: ConvTranspose3d,
    pub dec1: AdaBlock,
    pub up0: ConvTranspose3d,
    pub head: Conv3d,
    /// Full-resolution 1x1x1 path from the input straight to the logits.
    pub skip: Conv3d,
    cache: Option<MaeCache>,
}

#[derive(Debug, Clone)]
struct MaeCache {
    up0_in: Tensor,
}

impl MaeNet {
    pub fn new(cfg: MaeConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [w1, w2, w3] = cfg.widths;
        let cin = cfg.input_channels();
        let k = cfg.num_classes + 1;
        let l = cfg.levels;
        let e = cfg.embed;
        let ctx_patch = (cfg.context_channels > 0).then(|| Conv3d::new("ctx_patch", cfg.context_channels, e, [2; 3], [2; 3], [0; 3], &mut rng));
        let joint = if cfg.context_channels > 0 { 2 * e } else { e };
        Self {
            cfg,
            patch: Conv3d::new("patch", cin, e, [2; 3], [2; 3], [0; 3], &mut rng),
            ctx_patch,
            enc1: AdaBlock::new(Conv3d::same("enc1", joint, w1, 3, &mut rng), "enc1.ada", l),
            down1: AdaBlock::new(Conv3d::new("down1", w1, w2, [2; 3], [2; 3], [0; 3], &mut rng), "down1.ada", l),
            enc2: AdaBlock::new(Conv3d::same("enc2", w2, w2, 3, &mut rng), "enc2.ada", l),
            down2: AdaBlock::new(Conv3d::new("down2", w2, w3, [2; 3], [2; 3], [0; 3], &mut rng), "down2.ada", l),
            mid: AdaBlock::new(Conv3d::same("mid", w3, w3, 3, &mut rng), "mid.ada", l),
            up2: ConvTranspose3d::new("up2", w3, w2, [2; 3], &mut rng),
            dec2: AdaBlock::new(Conv3d::same("dec2", w2, w2, 3, &mut rng), "dec2.ada", l),
            up1: ConvTranspose3d::new("up1", w2, w1, [2; 3], &mut rng),
            dec1: AdaBlock::new(Conv3d::same("dec1", w1, w1, 3, &mut rng), "dec1.ada", l),
            up0: ConvTranspose3d::new("up0", w1, w1, [2; 3], &mut rng),
            head: Conv3d::same("head", w1, k, 1, &mut rng),
            skip: Conv3d::same("skip", cin, k, 1, &mut rng),
            cache: None,
        }
    }

    /// One-hot of the labels on visible voxels plus the visibility channel,
    /// `[C+2, nz, ny, nx]`.
    pub fn encode_input(&self, noisy: &VoxelGrid, mask: &VisibilityMask) -> Result<Tensor> {
        if noisy.meta != mask.meta {
            return contract("labels and visibility mask differ in geometry");
        }
        let [nx, ny, nz] = noisy.meta.dims;
        if nx % 8 != 0 || ny % 8 != 0 || nz % 8 != 0 {
            return contract(format!("grid dims {:?} must be multiples of 8", noisy.meta.dims));
        }
        let n = noisy.meta.num_voxels();
        let k = self.cfg.num_classes + 1;
        let mut x = Tensor::zeros(&[k + 1, nz, ny, nx]);
        for i in 0..n {
            if mask.classes[i] == VisClass::Visible {
                let l = noisy.labels[i] as usize;
                if l >= k {
                    return contract(format!("label {l} outside {k} classes"));
                }
                x.data[l * n + i] = 1.0;
                x.data[k * n + i] = 1.0;
            }
        }
        Ok(x)
    }

    /// Logits `[C+1, nz, ny, nx]` for every voxel.
    pub fn forward(&mut self, noisy: &VoxelGrid, mask: &VisibilityMask, t: usize, context: Option<&Tensor>) -> Result<Tensor> {
        if t >= self.cfg.levels {
            return contract(format!("noise level {t} not in 0..{}", self.cfg.levels));
        }
        let x = self.encode_input(noisy, mask)?;
        let p = self.patch.forward(&x)?;
        let h = match (&mut self.ctx_patch, context) {
            (Some(cp), Some(ctx)) => {
                if ctx.shape[1..] != x.shape[1..] || ctx.shape[0] != self.cfg.context_channels {
                    return contract(format!("context {:?} does not match the grid", ctx.shape));
                }
                Tensor::concat_channels(&[&p, &cp.forward(ctx)?])?
            }
            (None, None) => p,
            (Some(_), None) => return contract("this network expects context features"),
            (None, Some(_)) => return contract("this network was built without context features"),
        };
        let s1 = self.enc1.forward(&h, t)?;
        let d1 = self.down1.forward(&s1, t)?;
        let s2 = self.enc2.forward(&d1, t)?;
        let d2 = self.down2.forward(&s2, t)?;
        let m = self.mid.forward(&d2, t)?;
        let mut u2 = self.up2.forward(&m)?;
        add_into(&mut u2, &s2);
        let r2 = self.dec2.forward(&u2, t)?;
        let mut u1 = self.up1.forward(&r2)?;
        add_into(&mut u1, &s1);
        let r1 = self.dec1.forward(&u1, t)?;
        let u0 = self.up0.forward(&r1)?;
        let u0 = relu(&u0);
        let mut logits = self.head.forward(&u0)?;
        add_into(&mut logits, &self.skip.forward(&x)?);
        self.cache = Some(MaeCache { up0_in: u0 });
        if !logits.all_finite() {
            return Err(Error::NonFinite { name: "mae logits".into(), detail: "forward produced NaN".into() });
        }
        Ok(logits)
    }

    /// Accumulates parameter gradients from `grad_logits`.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let cache = self.cache.take().ok_or_else(|| Error::Contract("backward before forward".into()))?;
        self.skip.backward(grad_logits, false)?;
        let g = self.head.backward(grad_logits, true)?.expect("input grad");
        let g = relu_backward(&cache.up0_in, &g);
        let g = self.up0.backward(&g)?;
        let g_u1 = self.dec1.backward(&g, true)?.expect("input grad");
        let g_r2 = self.up1.backward(&g_u1)?;
        let g_u2 = self.dec2.backward(&g_r2, true)?.expect("input grad");
        let g_m = self.up2.backward(&g_u2)?;
        let g_d2 = self.mid.backward(&g_m, true)?.expect("input grad");
        let mut g_s2 = self.down2.backward(&g_d2, true)?.expect("input grad");
        add_into(&mut g_s2, &g_u2);
        let g_d1 = self.enc2.backward(&g_s2, true)?.expect("input grad");
        let mut g_s1 = self.down1.backward(&g_d1, true)?.expect("input grad");
        add_into(&mut g_s1, &g_u1);
        let g_h = self.enc1.backward(&g_s1, true)?.expect("input grad");
        match &mut self.ctx_patch {
            Some(cp) => {
                let e = self.cfg.embed;
                let parts = g_h.split_channels(&[e, e])?;
                self.patch.backward(&parts[0], false)?;
                cp.backward(&parts[1], false)?;
            }
            None => {
                self.patch.backward(&g_h, false)?;
            }
        }
        Ok(())
    }
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

impl Module for MaeNet {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.patch.visit(f);
        if let Some(cp) = &self.ctx_patch {
            cp.visit(f);
        }
        for b in [&self.enc1, &self.down1, &self.enc2, &self.down2, &self.mid] {
            b.visit(f);
        }
        self.up2.visit(f);
        self.dec2.visit(f);
        self.up1.visit(f);
        self.dec1.visit(f);
        self.up0.visit(f);
        self.head.visit(f);
        self.skip.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.patch.visit_mut(f);
        if let Some(cp) = &mut self.ctx_patch {
            cp.visit_mut(f);
        }
        for b in [&mut self.enc1, &mut self.down1, &mut self.enc2, &mut self.down2, &mut self.mid] {
            b.visit_mut(f);
        }
        self.up2.visit_mut(f);
        self.dec2.visit_mut(f);
        self.up1.visit_mut(f);
        self.dec1.visit_mut(f);
        self.up0.visit_mut(f);
        self.head.visit_mut(f);
        self.skip.visit_mut(f);
    }
}

/// Functional form of [`MaeNet::forward`].
pub fn mae_forward(net: &mut MaeNet, noisy: &VoxelGrid, mask: &VisibilityMask, t: usize, context: Option<&Tensor>) -> Result<Tensor> {
    net.forward(noisy, mask, t, context)
}

/// Per-voxel argmax of `[C+1, nz, ny, nx]` logits.
pub fn argmax_grid(logits: &Tensor, template: &VoxelGrid) -> VoxelGrid {
    let k = logits.shape[0];
    let n = logits.inner_len();
    let mut out = VoxelGrid::empty(template.meta);
    for i in 0..n {
        let mut best = (f32::NEG_INFINITY, EMPTY);
        for c in 0..k {
            let v = logits.data[c * n + i];
            if v > best.0 {
                best = (v, c as u8);
            }
        }
        out.labels[i] = best.1;
    }
    out
}

/// One stage-2 training example.
#[derive(Debug, Clone)]
pub struct MaeItem {
    /// Labels on the visible voxels (anything elsewhere is ignored).
    pub visible_labels: VoxelGrid,
    pub mask: VisibilityMask,
    pub gt: VoxelGrid,
    pub context: Option<Tensor>,
    pub depth_axis: usize,
}

/// Completion losses over every non-ignored voxel.
pub fn completion_losses(logits: &Tensor, gt: &VoxelGrid, class_weights: &[f32]) -> Result<(LossParts, Tensor)> {
    let k = logits.shape[0];
    let flat = logits.clone().reshaped(&[k, logits.inner_len()])?;
    let (ce, mut g) = weighted_ce_loss(&flat, &gt.labels, class_weights)?;
    let probs = softmax_channels(&flat);
    let (geo, g_geo) = affinity_loss(&probs, &gt.labels, AffinityMode::Geometry)?;
    let (sem, g_sem) = affinity_loss(&probs, &gt.labels, AffinityMode::Semantics)?;
    let mut gp = g_geo;
    add_into(&mut gp, &g_sem);
    add_into(&mut g, &softmax_channels_backward(&probs, &gp));
    Ok((LossParts { ce, geo, sem, depth: 0.0 }, g.reshaped(&logits.shape)?))
}

/// Class weights from full ground-truth grids.
pub fn grid_class_weights<'a>(grids: impl IntoIterator<Item = &'a VoxelGrid>, num_classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; num_classes + 1];
    for g in grids {
        for &l in &g.labels {
            if l != IGNORE && (l as usize) <= num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    class_weights_from_counts(&counts)
}

/// Denoising training against full ground truth. Each step draws a scene,
/// a noise level and a noise seed, perturbs the visible labels and fits
/// the whole grid.
pub fn train_mae_with(
    items: &[MaeItem],
    net: &mut MaeNet,
    spec: &NoiseSpec,
    opts: &TrainOptions,
    mut hook: impl FnMut(usize, &LossParts, &mut MaeNet) -> Result<bool>,
) -> Result<TrainTrace> {
    if items.is_empty() {
        return contract("empty training corpus");
    }
    if spec.levels() != net.cfg.levels {
        return contract(format!("noise spec has {} levels, network has {}", spec.levels(), net.cfg.levels));
    }
    let weights = grid_class_weights(items.iter().map(|i| &i.gt), net.cfg.num_classes);
    let level_dist = WeightedIndex::new(&spec.weights).map_err(|e| Error::Contract(format!("noise level weights: {e}")))?;
    let mut sgd = Sgd::new(opts.lr, opts.momentum);
    sgd.clip_norm = opts.clip_norm;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut trace = TrainTrace::default();
    let mut last_good = net.clone();
    for step in 0..opts.steps {
        if step % items.len() == 0 {
            order.shuffle(&mut rng);
        }
        let item = &items[order[step % items.len()]];
        let t = level_dist.sample(&mut rng);
        let noise_seed = splitmix64(opts.seed.wrapping_mul(0x1000_0000_01B3) ^ step as u64);
        let noisy = add_noise(&item.visible_labels, &item.mask, spec, t, noise_seed, item.depth_axis)?;
        net.zero_grad();
        let logits = net.forward(&noisy, &item.mask, t, item.context.as_ref())?;
        let (parts, g) = completion_losses(&logits, &item.gt, &weights)?;
        let loss = parts.total();
        if !loss.is_finite() {
            restore_params(net, &last_good);
            return Err(Error::NonFinite { name: "mae loss".into(), detail: format!("step {step}") });
        }
        net.backward(&g)?;
        if let Err(e) = sgd.step(net) {
            restore_params(net, &last_good);
            return Err(e);
        }
        restore_params(&mut last_good, net);
        trace.losses.push(loss);
        trace.parts.push(parts);
        log::debug!("mae step {step} t {t} loss {loss:.4} ce {:.4}", parts.ce);
        if !hook(step, &parts, net)? {
            break;
        }
    }
    Ok(trace)
}

pub fn train_mae(items: &[MaeItem], net: &mut MaeNet, spec: &NoiseSpec, opts: &TrainOptions) -> Result<TrainTrace> {
    train_mae_with(items, net, spec, opts, |_, _, _| Ok(true))
}
