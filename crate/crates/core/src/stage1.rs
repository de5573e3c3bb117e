//! Stage 1: visible-region network.
//!
//! Image encoder -> per-voxel fusion of the encoded distance field with
//! RoI-pooled image features -> deformable refinement against the
//! depth-lifted image features -> classification of the visible voxels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Error, Result};
use crate::grid::{CameraModel, DepthMap, GridMeta, VoxelGrid, EMPTY, IGNORE};
use crate::lifting::{
    lift_scatter_backward, lift_scatter_with, roi_pool_voxels, roi_pool_voxels_backward, Deform3d, DepthProbVolume,
    FrustumMap, PixelWindow,
};
use crate::nn::loss::{affinity_loss, class_weights_from_counts, depth_loss, weighted_ce_loss, AffinityMode};
use crate::nn::{relu, relu_backward, softmax_channels, softmax_channels_backward, BatchNorm, Conv3d, Module, Parameter, Sgd};
use crate::synth::Sample;
use crate::tensor::Tensor;
use crate::visibility::{classify_visibility, compute_udistance, VisibilityMask};

/// Downsampling factor of the image encoder.
pub const IMAGE_STRIDE: usize = 4;

/// Architecture and geometry settings of the stage-1 network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Config {
    /// Semantic classes; the network predicts `num_classes + 1` (with empty).
    pub num_classes: usize,
    pub image_channels: usize,
    pub geo_channels: usize,
    pub ctx_channels: usize,
    pub deform_samples: usize,
    pub depth_bins: usize,
    pub depth_range: (f32, f32),
    pub theta_d: f64,
    pub gamma: f64,
    pub theta: f64,
    /// Feed the distance field to the geometric encoder (zeros otherwise).
    pub use_udistance: bool,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            num_classes: 6,
            image_channels: 32,
            geo_channels: 8,
            ctx_channels: 16,
            deform_samples: 4,
            depth_bins: 32,
            depth_range: (0.2, 14.0),
            theta_d: crate::visibility::DEFAULT_THETA_D,
            gamma: crate::visibility::DEFAULT_GAMMA,
            theta: crate::visibility::DEFAULT_THETA,
            use_udistance: true,
        }
    }
}

/// Geometry-dependent inputs of one scene, computed once.
#[derive(Debug, Clone)]
pub struct Stage1Input {
    pub meta: GridMeta,
    pub camera: CameraModel,
    pub image: Tensor,
    pub depth: DepthMap,
    pub mask: VisibilityMask,
    /// `[1, nz, ny, nx]`.
    pub udist: Tensor,
    /// Feature-map window of every voxel's projected box.
    pub windows: Vec<Option<PixelWindow>>,
    pub frustum: FrustumMap,
    pub visible: Vec<usize>,
    /// Ground-truth labels of the visible voxels, when known.
    pub target: Option<Vec<u8>>,
}

/// Builds the per-scene inputs. `image` is `[3, 1, H, W]`.
pub fn prepare_input(
    cfg: &Stage1Config,
    meta: &GridMeta,
    camera: &CameraModel,
    image: Tensor,
    depth: DepthMap,
    gt: Option<&VoxelGrid>,
) -> Result<Stage1Input> {
    let (w, h) = camera.image_size;
    if image.shape != [3, 1, h, w] {
        return contract(format!("image {:?} does not match the {w}x{h} camera", image.shape));
    }
    if w % IMAGE_STRIDE != 0 || h % IMAGE_STRIDE != 0 {
        return contract(format!("image size must be a multiple of {IMAGE_STRIDE}"));
    }
    let mask = classify_visibility(meta, camera, &depth, cfg.theta_d)?;
    let visible = mask.visible_indices();
    if visible.is_empty() {
        return contract("no visible voxel: the camera does not see the grid");
    }
    let ud = compute_udistance(meta, camera, &depth, cfg.gamma, cfg.theta)?;
    let [nx, ny, nz] = meta.dims;
    let mut udist = Tensor::from_vec(&[1, nz, ny, nx], ud.values)?;
    if !cfg.use_udistance {
        udist.data.fill(0.0);
    }
    let (fw, fh) = (w / IMAGE_STRIDE, h / IMAGE_STRIDE);
    let inv = 1.0 / IMAGE_STRIDE as f64;
    let windows = (0..meta.num_voxels())
        .map(|i| {
            camera
                .voxel_bbox_unchecked(meta, meta.unflat(i))
                .and_then(|r| PixelWindow::covering(&r.scaled(inv), fw, fh))
        })
        .collect();
    let edges = DepthProbVolume::uniform_edges(cfg.depth_range.0, cfg.depth_range.1, cfg.depth_bins);
    let frustum = FrustumMap::build(fw, fh, &edges, meta, camera)?;
    let target = match gt {
        Some(g) => {
            if g.meta != *meta {
                return contract("ground truth grid does not match the grid geometry");
            }
            Some(visible.iter().map(|&i| g.labels[i]).collect())
        }
        None => None,
    };
    Ok(Stage1Input { meta: *meta, camera: *camera, image, depth, mask, udist, windows, frustum, visible, target })
}

pub fn prepare_sample(cfg: &Stage1Config, meta: &GridMeta, sample: &Sample) -> Result<Stage1Input> {
    prepare_input(cfg, meta, &sample.camera, sample.image.to_tensor(), sample.depth.clone(), Some(&sample.grid))
}

/// Result of a stage-1 forward pass.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    /// `[C+1, N_visible]`.
    pub visible_logits: Tensor,
    pub visible: Vec<usize>,
    /// Argmax labels on visible voxels, empty elsewhere.
    pub o_v: VoxelGrid,
    /// Refined context features `[ctx, nz, ny, nx]`.
    pub f3d2: Tensor,
    pub dp: DepthProbVolume,
    pub mask: VisibilityMask,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
struct Trace {
    enc: [Tensor; 4],
    f2d_dims: (usize, usize),
    dp: DepthProbVolume,
    flift: Tensor,
    g1: Tensor,
    g2: Tensor,
    roi_arg: Vec<u32>,
    f31: Tensor,
    trunk: Tensor,
    hidden: Tensor,
    visible: Vec<usize>,
    frustum: FrustumMap,
}

/// The stage-1 network.
#[derive(Debug, Clone)]
pub struct Stage1Net {
    pub cfg: Stage1Config,
    pub enc: [Conv3d; 4],
    pub depth_head: Conv3d,
    pub lift_proj: Conv3d,
    pub geo1: Conv3d,
    pub geo_bn1: BatchNorm,
    pub geo2: Conv3d,
    pub geo_bn2: BatchNorm,
    pub fuse: Conv3d,
    pub fuse_bn: BatchNorm,
    pub deform: Deform3d,
    pub trunk: Conv3d,
    pub trunk_bn: BatchNorm,
    pub head1: Conv3d,
    pub head2: Conv3d,
    trace: Option<Trace>,
}

impl Stage1Net {
    pub fn new(cfg: Stage1Config, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ci = cfg.image_channels;
        let g = cfg.geo_channels;
        let c = cfg.ctx_channels;
        let enc = [
            Conv3d::planar("enc0", 3, ci / 2, 3, 1, &mut rng),
            Conv3d::planar("enc1", ci / 2, ci, 3, 2, &mut rng),
            Conv3d::planar("enc2", ci, ci, 3, 2, &mut rng),
            Conv3d::planar("enc3", ci, ci, 3, 1, &mut rng),
        ];
        Self {
            cfg,
            enc,
            depth_head: Conv3d::planar("depth_head", ci, cfg.depth_bins, 1, 1, &mut rng),
            lift_proj: Conv3d::planar("lift_proj", ci, c, 1, 1, &mut rng),
            geo1: Conv3d::same("geo1", 1, g, 3, &mut rng),
            geo_bn1: BatchNorm::new("geo_bn1", g),
            geo2: Conv3d::same("geo2", g, g, 3, &mut rng),
            geo_bn2: BatchNorm::new("geo_bn2", g),
            fuse: Conv3d::same("fuse", g + ci, c, 1, &mut rng),
            fuse_bn: BatchNorm::new("fuse_bn", c),
            deform: Deform3d::new("deform", c, cfg.deform_samples, &mut rng),
            trunk: Conv3d::same("trunk", c, c, 3, &mut rng),
            trunk_bn: BatchNorm::new("trunk_bn", c),
            head1: Conv3d::same("head1", c, c, 1, &mut rng),
            head2: Conv3d::same("head2", c, cfg.num_classes + 1, 1, &mut rng),
            trace: None,
        }
    }

    pub fn bin_edges(&self) -> Vec<f32> {
        DepthProbVolume::uniform_edges(self.cfg.depth_range.0, self.cfg.depth_range.1, self.cfg.depth_bins)
    }

    /// Full forward pass; keeps the activations needed by [`Stage1Net::backward`].
    pub fn forward(&mut self, input: &Stage1Input) -> Result<Stage1Output> {
        let meta = input.meta;
        let [nx, ny, nz] = meta.dims;
        let nvox = meta.num_voxels();
        if input.udist.shape != [1, nz, ny, nx] || input.windows.len() != nvox {
            return contract("stage-1 input was prepared for a different grid");
        }
        if input.visible.is_empty() {
            return contract("no visible voxel: the camera does not see the grid");
        }
        // image encoder
        let e0 = relu(&self.enc[0].forward(&input.image)?);
        let e1 = relu(&self.enc[1].forward(&e0)?);
        let e2 = relu(&self.enc[2].forward(&e1)?);
        let f2d = relu(&self.enc[3].forward(&e2)?);
        let (fh, fw) = (f2d.shape[2], f2d.shape[3]);
        if (fw, fh) != (input.frustum.feat_width, input.frustum.feat_height) {
            return contract("frustum map does not match the encoder output");
        }

        // depth distribution and frustum lifting
        let dp = DepthProbVolume::from_logits(self.bin_edges(), &self.depth_head.forward(&f2d)?)?;
        let flift = self.lift_proj.forward(&f2d)?.reshaped(&[self.cfg.ctx_channels, fh, fw])?;
        let lifted = lift_scatter_with(&flift, &dp, &input.frustum, &meta)?.volume;

        // geometric encoding of the distance field
        let g1 = relu(&self.geo_bn1.forward(&self.geo1.forward(&input.udist)?)?);
        let g2 = relu(&self.geo_bn2.forward(&self.geo2.forward(&g1)?)?);

        // per-voxel fusion with RoI-pooled image features
        let (roi, roi_arg) = roi_pool_voxels(&f2d, &input.windows)?;
        let roi = roi.reshaped(&[self.cfg.image_channels, nz, ny, nx])?;
        let cat = Tensor::concat_channels(&[&g2, &roi])?;
        let f31 = relu(&self.fuse_bn.forward(&self.fuse.forward(&cat)?)?);

        // deformable refinement against the lifted volume
        let f3d2 = self.deform.forward(&f31, &lifted)?;

        // visible-voxel classifier
        let trunk = relu(&self.trunk_bn.forward(&self.trunk.forward(&f3d2)?)?);
        let c = self.cfg.ctx_channels;
        let nv = input.visible.len();
        let mut gathered = Tensor::zeros(&[c, 1, 1, nv]);
        for ch in 0..c {
            let src = &trunk.data[ch * nvox..(ch + 1) * nvox];
            let dst = &mut gathered.data[ch * nv..(ch + 1) * nv];
            for (d, &v) in dst.iter_mut().zip(&input.visible) {
                *d = src[v];
            }
        }
        let hidden = relu(&self.head1.forward(&gathered)?);
        let logits = self.head2.forward(&hidden)?.reshaped(&[self.cfg.num_classes + 1, nv])?;
        if !logits.all_finite() {
            return Err(Error::NonFinite { name: "stage1 logits".into(), detail: "forward produced NaN".into() });
        }

        let mut o_v = VoxelGrid::empty(meta);
        let k = self.cfg.num_classes + 1;
        for (j, &v) in input.visible.iter().enumerate() {
            let mut best = (f32::NEG_INFINITY, EMPTY);
            for cls in 0..k {
                let l = logits.data[cls * nv + j];
                if l > best.0 {
                    best = (l, cls as u8);
                }
            }
            o_v.labels[v] = best.1;
        }

        self.trace = Some(Trace {
            enc: [e0, e1, e2, f2d],
            f2d_dims: (fh, fw),
            dp: dp.clone(),
            flift,
            g1,
            g2,
            roi_arg,
            f31,
            trunk,
            hidden,
            visible: input.visible.clone(),
            frustum: input.frustum.clone(),
        });
        Ok(Stage1Output { visible_logits: logits, visible: input.visible.clone(), o_v, f3d2, dp, mask: input.mask.clone() })
    }

    /// Accumulates parameter gradients from the gradient of the visible
    /// logits (`[C+1, N_visible]`) and, optionally, of the depth
    /// probabilities (`[H', W', nbins]`).
    pub fn backward(&mut self, grad_logits: &Tensor, grad_dp: Option<&Tensor>) -> Result<()> {
        let tr = self.trace.take().ok_or_else(|| Error::Contract("backward before forward".into()))?;
        let c = self.cfg.ctx_channels;
        let ci = self.cfg.image_channels;
        let nv = tr.visible.len();
        let shape3 = tr.trunk.shape.clone();
        let nvox = tr.trunk.inner_len();
        let (fh, fw) = tr.f2d_dims;

        // classifier
        let gl = grad_logits.clone().reshaped(&[self.cfg.num_classes + 1, 1, 1, nv])?;
        let gh = self.head2.backward(&gl, true)?.expect("input grad");
        let gh = relu_backward(&tr.hidden, &gh);
        let gg = self.head1.backward(&gh, true)?.expect("input grad");
        let mut g_trunk = Tensor::zeros(&shape3);
        for ch in 0..c {
            for (j, &v) in tr.visible.iter().enumerate() {
                g_trunk.data[ch * nvox + v] = gg.data[ch * nv + j];
            }
        }
        let g = relu_backward(&tr.trunk, &g_trunk);
        let g = self.trunk_bn.backward(&g)?;
        let g_f3d2 = self.trunk.backward(&g, true)?.expect("input grad");

        // deformable refinement
        let (g_f31, g_lifted) = self.deform.backward(&g_f3d2)?;

        // fusion
        let g = relu_backward(&tr.f31, &g_f31);
        let g = self.fuse_bn.backward(&g)?;
        let g_cat = self.fuse.backward(&g, true)?.expect("input grad");
        let parts = g_cat.split_channels(&[self.cfg.geo_channels, ci])?;

        // geometric encoder (input is data, no gradient needed)
        let g = relu_backward(&tr.g2, &parts[0]);
        let g = self.geo_bn2.backward(&g)?;
        let g = self.geo2.backward(&g, true)?.expect("input grad");
        let g = relu_backward(&tr.g1, &g);
        let g = self.geo_bn1.backward(&g)?;
        self.geo1.backward(&g, false)?;

        // image-feature gradient from the RoI path
        let f2d_shape = tr.enc[3].shape.clone();
        let g_roi = parts[1].clone().reshaped(&[ci, nvox])?;
        let mut g_f2d = roi_pool_voxels_backward(&tr.roi_arg, &g_roi, &f2d_shape);

        // lifting path
        let (g_flift, mut g_probs) = lift_scatter_backward(&tr.flift, &tr.dp, &tr.frustum, &g_lifted)?;
        let g_flift = g_flift.reshaped(&[c, 1, fh, fw])?;
        let gp = self.lift_proj.backward(&g_flift, true)?.expect("input grad");
        add_into(&mut g_f2d, &gp);

        // depth head
        if let Some(gd) = grad_dp {
            add_into(&mut g_probs, gd);
        }
        let nb = self.cfg.depth_bins;
        let probs_cf = tr.dp.channel_first();
        let gp_cf = tr.dp.grad_to_channel_first(&g_probs).reshaped(&[nb, fh * fw])?;
        let g_logits_dp = softmax_channels_backward(&probs_cf, &gp_cf).reshaped(&[nb, 1, fh, fw])?;
        let gd = self.depth_head.backward(&g_logits_dp, true)?.expect("input grad");
        add_into(&mut g_f2d, &gd);

        // image encoder
        let g = relu_backward(&tr.enc[3], &g_f2d);
        let g = self.enc[3].backward(&g, true)?.expect("input grad");
        let g = relu_backward(&tr.enc[2], &g);
        let g = self.enc[2].backward(&g, true)?.expect("input grad");
        let g = relu_backward(&tr.enc[1], &g);
        let g = self.enc[1].backward(&g, true)?.expect("input grad");
        let g = relu_backward(&tr.enc[0], &g);
        self.enc[0].backward(&g, false)?;
        Ok(())
    }
}

fn add_into(a: &mut Tensor, b: &Tensor) {
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
}

impl Module for Stage1Net {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        for l in &self.enc {
            l.visit(f);
        }
        self.depth_head.visit(f);
        self.lift_proj.visit(f);
        self.geo1.visit(f);
        self.geo_bn1.visit(f);
        self.geo2.visit(f);
        self.geo_bn2.visit(f);
        self.fuse.visit(f);
        self.fuse_bn.visit(f);
        self.deform.visit(f);
        self.trunk.visit(f);
        self.trunk_bn.visit(f);
        self.head1.visit(f);
        self.head2.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        for l in &mut self.enc {
            l.visit_mut(f);
        }
        self.depth_head.visit_mut(f);
        self.lift_proj.visit_mut(f);
        self.geo1.visit_mut(f);
        self.geo_bn1.visit_mut(f);
        self.geo2.visit_mut(f);
        self.geo_bn2.visit_mut(f);
        self.fuse.visit_mut(f);
        self.fuse_bn.visit_mut(f);
        self.deform.visit_mut(f);
        self.trunk.visit_mut(f);
        self.trunk_bn.visit_mut(f);
        self.head1.visit_mut(f);
        self.head2.visit_mut(f);
    }
}

/// Convenience wrapper: prepare and run one scene.
pub fn stage1_forward(
    image: &Tensor,
    depth: &DepthMap,
    camera: &CameraModel,
    meta: &GridMeta,
    net: &mut Stage1Net,
    theta_d: f64,
) -> Result<Stage1Output> {
    let cfg = Stage1Config { theta_d, ..net.cfg };
    let input = prepare_input(&cfg, meta, camera, image.clone(), depth.clone(), None)?;
    net.forward(&input)
}

/// Loss terms of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub geo: f64,
    pub sem: f64,
    pub depth: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.geo + self.sem + self.depth
    }
}

/// Visible-only losses of a forward pass and the gradients they induce.
pub fn stage1_losses(out: &Stage1Output, target: &[u8], depth: &DepthMap, class_weights: &[f32]) -> Result<(LossParts, Tensor, Tensor)> {
    let logits = &out.visible_logits;
    let (ce, mut g_logits) = weighted_ce_loss(logits, target, class_weights)?;
    let probs = softmax_channels(logits);
    let (geo, g_geo) = affinity_loss(&probs, target, AffinityMode::Geometry)?;
    let (sem, g_sem) = affinity_loss(&probs, target, AffinityMode::Semantics)?;
    let mut g_probs = g_geo;
    add_into(&mut g_probs, &g_sem);
    add_into(&mut g_logits, &softmax_channels_backward(&probs, &g_probs));
    let (dl, g_dp) = depth_loss(&out.dp, depth)?;
    Ok((LossParts { ce, geo, sem, depth: dl }, g_logits, g_dp))
}

/// Optimizer and schedule settings shared by both stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f32,
    pub momentum: f32,
    pub clip_norm: Option<f32>,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { steps: 200, lr: 0.05, momentum: 0.9, clip_norm: Some(5.0), seed: 0 }
    }
}

/// Per-step losses.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub losses: Vec<f64>,
    pub parts: Vec<LossParts>,
}

/// Class weights from the visible ground-truth labels of a corpus.
pub fn visible_class_weights(items: &[Stage1Input], num_classes: usize) -> Vec<f32> {
    let mut counts = vec![0usize; num_classes + 1];
    for it in items {
        for &l in it.target.iter().flatten() {
            if l != IGNORE && (l as usize) <= num_classes {
                counts[l as usize] += 1;
            }
        }
    }
    class_weights_from_counts(&counts)
}

/// Copies parameter values from `src` into `dst` (same architecture).
pub(crate) fn restore_params(dst: &mut dyn Module, src: &dyn Module) {
    let mut vals = Vec::new();
    src.visit(&mut |p| vals.push(p.value.data.clone()));
    let mut it = vals.into_iter();
    dst.visit_mut(&mut |p| {
        if let Some(v) = it.next() {
            p.value.data = v;
        }
    });
}

/// Trains on `items` (one scene per step, reshuffled every pass). `hook`
/// runs after every step and may stop training by returning `false`.
pub fn train_stage1_with(
    items: &[Stage1Input],
    net: &mut Stage1Net,
    opts: &TrainOptions,
    mut hook: impl FnMut(usize, f64, &mut Stage1Net) -> Result<bool>,
) -> Result<TrainTrace> {
    if items.is_empty() {
        return contract("empty training corpus");
    }
    if items.iter().any(|i| i.target.is_none()) {
        return contract("every training input needs ground-truth labels");
    }
    let weights = visible_class_weights(items, net.cfg.num_classes);
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
        net.zero_grad();
        let out = net.forward(item)?;
        let (parts, g_logits, g_dp) = stage1_losses(&out, item.target.as_deref().unwrap_or_default(), &item.depth, &weights)?;
        let loss = parts.total();
        if !loss.is_finite() {
            restore_params(net, &last_good);
            return Err(Error::NonFinite { name: "stage1 loss".into(), detail: format!("step {step}") });
        }
        net.backward(&g_logits, Some(&g_dp))?;
        if let Err(e) = sgd.step(net) {
            restore_params(net, &last_good);
            return Err(e);
        }
        restore_params(&mut last_good, net);
        trace.losses.push(loss);
        trace.parts.push(parts);
        log::debug!("stage1 step {step} loss {loss:.4}");
        if !hook(step, loss, net)? {
            break;
        }
    }
    Ok(trace)
}

pub fn train_stage1(items: &[Stage1Input], net: &mut Stage1Net, opts: &TrainOptions) -> Result<TrainTrace> {
    train_stage1_with(items, net, opts, |_, _, _| Ok(true))
}

/// Fraction of visible voxels whose predicted label matches ground truth.
pub fn visible_accuracy(out: &Stage1Output, target: &[u8]) -> f64 {
    let mut right = 0usize;
    let mut total = 0usize;
    for (&v, &t) in out.visible.iter().zip(target) {
        if t != IGNORE {
            total += 1;
            right += (out.o_v.labels[v] == t) as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        right as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_sample, SceneSpec};

    fn tiny() -> (Stage1Config, Stage1Input) {
        let spec = SceneSpec::bench();
        let cfg = Stage1Config { image_channels: 8, geo_channels: 4, ctx_channels: 6, depth_bins: 8, deform_samples: 2, ..Default::default() };
        let s = make_sample(&spec, 1).unwrap();
        (cfg, prepare_sample(&cfg, &spec.meta, &s).unwrap())
    }

    #[test]
    fn masking_and_shapes() {
        let (cfg, input) = tiny();
        let mut net = Stage1Net::new(cfg, 0);
        let out = net.forward(&input).unwrap();
        let [nx, ny, nz] = input.meta.dims;
        assert_eq!(out.f3d2.shape, vec![cfg.ctx_channels, nz, ny, nx]);
        assert_eq!(out.visible_logits.shape, vec![cfg.num_classes + 1, input.visible.len()]);
        for (i, &l) in out.o_v.labels.iter().enumerate() {
            if !input.mask.is_visible(i) {
                assert_eq!(l, EMPTY);
            }
        }
        for row in out.dp.probs.data.chunks(cfg.depth_bins) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
        let again = net.forward(&input).unwrap();
        assert_eq!(again.visible_logits, out.visible_logits);
    }

    #[test]
    fn gradient_reaches_first_image_layer() {
        let (cfg, input) = tiny();
        let mut net = Stage1Net::new(cfg, 0);
        let out = net.forward(&input).unwrap();
        let w = visible_class_weights(std::slice::from_ref(&input), cfg.num_classes);
        let (_, gl, gd) = stage1_losses(&out, input.target.as_ref().unwrap(), &input.depth, &w).unwrap();
        net.backward(&gl, Some(&gd)).unwrap();
        assert!(net.enc[0].weight.grad_l2() > 0.0);
        assert!(net.geo1.weight.grad_l2() > 0.0);
        assert!(net.deform.offset_head.weight.grad_l2() > 0.0);
        // without the depth loss, the first layer still learns through the RoI and lifting paths
        let mut net = Stage1Net::new(cfg, 0);
        let out = net.forward(&input).unwrap();
        let (_, gl, _) = stage1_losses(&out, input.target.as_ref().unwrap(), &input.depth, &w).unwrap();
        net.backward(&gl, None).unwrap();
        assert!(net.enc[0].weight.grad_l2() > 0.0);
        assert!(net.lift_proj.weight.grad_l2() > 0.0);
    }

    #[test]
    fn frozen_trace_is_constant() {
        let (cfg, input) = tiny();
        let mut net = Stage1Net::new(cfg, 0);
        net.visit_mut(&mut |p| p.trainable = false);
        let opts = TrainOptions { steps: 4, ..Default::default() };
        let tr = train_stage1(std::slice::from_ref(&input), &mut net, &opts).unwrap();
        assert!(tr.losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn loss_decreases_on_one_scene() {
        let (cfg, input) = tiny();
        let mut net = Stage1Net::new(cfg, 0);
        let opts = TrainOptions { steps: 30, ..Default::default() };
        let tr = train_stage1(std::slice::from_ref(&input), &mut net, &opts).unwrap();
        assert!(tr.losses.last().unwrap() < &tr.losses[0]);
    }
}
