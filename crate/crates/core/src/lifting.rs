//! Moving image features into the voxel volume.
//!
//! * [`roi_pool`]: max-pool an image-feature rectangle (the projected
//!   footprint of a voxel) into a fixed-size vector.
//! * [`lift_scatter`]: spread every feature pixel along its camera ray,
//!   weighted by a per-pixel depth distribution, and average what lands in
//!   each voxel.
//! * [`trilinear_sample`] and [`Deform3d`]: learned-offset sampling of the
//!   lifted volume, added residually to the per-voxel features.
//!
//! All ops come with explicit backward functions.

use rand::Rng;

use crate::error::{contract, Result};
use crate::grid::{CameraModel, GridMeta, PixelRect};
use crate::nn::{Conv3d, Module, Parameter};
use crate::tensor::Tensor;

/// Per-pixel categorical distribution over depth bins, probs `[H, W, nbins]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthProbVolume {
    pub width: usize,
    pub height: usize,
    pub nbins: usize,
    /// `nbins + 1` strictly increasing edges, meters.
    pub bin_edges: Vec<f32>,
    pub probs: Tensor,
}

impl DepthProbVolume {
    pub fn new(width: usize, height: usize, bin_edges: Vec<f32>, probs: Tensor) -> Result<Self> {
        if bin_edges.len() < 2 || bin_edges.windows(2).any(|w| !(w[1] > w[0])) {
            return contract("depth bin edges must be strictly increasing with at least one bin");
        }
        let nbins = bin_edges.len() - 1;
        if probs.shape != [height, width, nbins] {
            return contract(format!("probs shape {:?} is not [{height}, {width}, {nbins}]", probs.shape));
        }
        for (pix, row) in probs.data.chunks(nbins).enumerate() {
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-5 {
                return contract(format!("pixel {pix} is not a probability distribution (sum {s})"));
            }
        }
        Ok(Self { width, height, nbins, bin_edges, probs })
    }

    /// `nbins` equal-width bins over `[min, max]`.
    pub fn uniform_edges(min: f32, max: f32, nbins: usize) -> Vec<f32> {
        (0..=nbins).map(|i| min + (max - min) * i as f32 / nbins as f32).collect()
    }

    pub fn bin_center(&self, b: usize) -> f64 {
        0.5 * (self.bin_edges[b] as f64 + self.bin_edges[b + 1] as f64)
    }

    /// Bin containing `depth`, clamped to the first / last bin.
    pub fn bin_of(&self, depth: f64) -> usize {
        let idx = self.bin_edges[1..self.nbins].partition_point(|&e| (e as f64) <= depth);
        idx.min(self.nbins - 1)
    }

    /// Builds the volume from head logits laid out `[nbins, H, W]`
    /// (channel-first) by a softmax over bins.
    pub fn from_logits(bin_edges: Vec<f32>, logits: &Tensor) -> Result<Self> {
        let nbins = bin_edges.len().saturating_sub(1);
        let (h, w) = match logits.shape[..] {
            [b, h, w] if b == nbins => (h, w),
            [b, 1, h, w] if b == nbins => (h, w),
            _ => return contract(format!("logits {:?} do not have {nbins} bins", logits.shape)),
        };
        let flat = logits.clone().reshaped(&[nbins, h * w])?;
        let p = crate::nn::softmax_channels(&flat);
        let mut probs = Tensor::zeros(&[h, w, nbins]);
        for b in 0..nbins {
            for pix in 0..h * w {
                probs.data[pix * nbins + b] = p.data[b * h * w + pix];
            }
        }
        Self::new(w, h, bin_edges, probs)
    }

    /// Re-lays a `[H, W, nbins]` gradient as channel-first `[nbins, H, W]`.
    pub fn grad_to_channel_first(&self, g: &Tensor) -> Tensor {
        let (n, hw) = (self.nbins, self.width * self.height);
        let mut out = Tensor::zeros(&[n, self.height, self.width]);
        for pix in 0..hw {
            for b in 0..n {
                out.data[b * hw + pix] = g.data[pix * n + b];
            }
        }
        out
    }

    /// Probabilities as channel-first `[nbins, H*W]`.
    pub fn channel_first(&self) -> Tensor {
        let (n, hw) = (self.nbins, self.width * self.height);
        let mut out = Tensor::zeros(&[n, hw]);
        for pix in 0..hw {
            for b in 0..n {
                out.data[b * hw + pix] = self.probs.data[pix * n + b];
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// RoI pooling

/// Integer pixel window `[x0, x1) x [y0, y1)` of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelWindow {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelWindow {
    /// Pixels touched by `rect` on a `width x height` map; `None` when the
    /// rectangle has zero area or misses the map.
    pub fn covering(rect: &PixelRect, width: usize, height: usize) -> Option<Self> {
        if !(rect.x1 > rect.x0 && rect.y1 > rect.y0) {
            return None;
        }
        let x0 = rect.x0.max(0.0).floor() as usize;
        let y0 = rect.y0.max(0.0).floor() as usize;
        let x1 = (rect.x1.ceil().max(0.0) as usize).min(width);
        let y1 = (rect.y1.ceil().max(0.0) as usize).min(height);
        (x1 > x0 && y1 > y0).then_some(Self { x0, y0, x1, y1 })
    }
}

/// Max over one window of one channel; returns the value and flat position.
#[inline]
fn window_max(ch: &[f32], width: usize, win: PixelWindow) -> (f32, usize) {
    let mut best = (f32::NEG_INFINITY, 0);
    for y in win.y0..win.y1 {
        for x in win.x0..win.x1 {
            let i = y * width + x;
            if ch[i] > best.0 {
                best = (ch[i], i);
            }
        }
    }
    best
}

/// Result of [`roi_pool`]: pooled values `[C, ph*pw]` and, per output entry,
/// the flat feature index that won the max (`None` for empty cells).
#[derive(Debug, Clone)]
pub struct RoiPooled {
    pub output: Tensor,
    pub argmax: Vec<Option<usize>>,
}

/// Max-pools `features` (`[C, H, W]`) inside `bbox` (feature-map pixel
/// coordinates, pre-clipped) over a `ph x pw` grid of cells. Empty cells and
/// degenerate boxes produce zeros.
pub fn roi_pool(features: &Tensor, bbox: &PixelRect, out: (usize, usize)) -> Result<RoiPooled> {
    let (c, h, w) = match features.shape[..] {
        [c, h, w] => (c, h, w),
        _ => return contract(format!("features must be [C, H, W], got {:?}", features.shape)),
    };
    let (ph, pw) = out;
    if ph == 0 || pw == 0 {
        return contract("RoI output size must be at least 1x1");
    }
    let mut output = Tensor::zeros(&[c, ph * pw]);
    let mut argmax = vec![None; c * ph * pw];
    let Some(win) = PixelWindow::covering(bbox, w, h) else {
        return Ok(RoiPooled { output, argmax });
    };
    let bin_h = (win.y1 - win.y0) as f64 / ph as f64;
    let bin_w = (win.x1 - win.x0) as f64 / pw as f64;
    for i in 0..ph {
        for j in 0..pw {
            let cell = PixelWindow {
                y0: win.y0 + (i as f64 * bin_h).floor() as usize,
                y1: (win.y0 + ((i + 1) as f64 * bin_h).ceil() as usize).min(win.y1),
                x0: win.x0 + (j as f64 * bin_w).floor() as usize,
                x1: (win.x0 + ((j + 1) as f64 * bin_w).ceil() as usize).min(win.x1),
            };
            if cell.y1 <= cell.y0 || cell.x1 <= cell.x0 {
                continue;
            }
            for ch in 0..c {
                let plane = &features.data[ch * h * w..(ch + 1) * h * w];
                let (v, idx) = window_max(plane, w, cell);
                let o = ch * ph * pw + i * pw + j;
                output.data[o] = v;
                argmax[o] = Some(ch * h * w + idx);
            }
        }
    }
    Ok(RoiPooled { output, argmax })
}

/// Routes the pooled gradient back to the winning feature positions.
pub fn roi_pool_backward(pooled: &RoiPooled, grad_out: &Tensor, feature_shape: &[usize]) -> Tensor {
    let mut g = Tensor::zeros(feature_shape);
    for (o, am) in pooled.argmax.iter().enumerate() {
        if let Some(i) = am {
            g.data[*i] += grad_out.data[o];
        }
    }
    g
}

/// One pooled vector per voxel (`1 x 1` RoI output), from precomputed
/// feature windows. Returns `[C, N]` and the per-entry argmax (`u32::MAX`
/// for voxels without a window).
pub fn roi_pool_voxels(features: &Tensor, windows: &[Option<PixelWindow>]) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = match features.shape[..] {
        [c, h, w] => (c, h, w),
        [c, 1, h, w] => (c, h, w),
        _ => return contract(format!("features must be [C, H, W], got {:?}", features.shape)),
    };
    let n = windows.len();
    let mut out = Tensor::zeros(&[c, n]);
    let mut arg = vec![u32::MAX; c * n];
    for ch in 0..c {
        let plane = &features.data[ch * h * w..(ch + 1) * h * w];
        for (v, win) in windows.iter().enumerate() {
            if let Some(win) = win {
                let (val, idx) = window_max(plane, w, *win);
                out.data[ch * n + v] = val;
                arg[ch * n + v] = (ch * h * w + idx) as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn roi_pool_voxels_backward(argmax: &[u32], grad_out: &Tensor, feature_shape: &[usize]) -> Tensor {
    let mut g = Tensor::zeros(feature_shape);
    for (o, &i) in argmax.iter().enumerate() {
        if i != u32::MAX {
            g.data[i as usize] += grad_out.data[o];
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Frustum scatter

/// Precomputed geometry of a frustum scatter: which voxel each
/// (feature pixel, depth bin) sample lands in.
#[derive(Debug, Clone)]
pub struct FrustumMap {
    pub feat_width: usize,
    pub feat_height: usize,
    pub nbins: usize,
    /// `(pixel, bin, voxel)` for every sample that lands inside the grid.
    pub samples: Vec<(u32, u32, u32)>,
    /// Samples per voxel.
    pub hits: Vec<f32>,
}

impl FrustumMap {
    /// Samples sit at the feature-pixel center, back-projected to each
    /// bin-center depth.
    pub fn build(
        feat_width: usize,
        feat_height: usize,
        bin_edges: &[f32],
        meta: &GridMeta,
        camera: &CameraModel,
    ) -> Result<Self> {
        let (w, h) = camera.image_size;
        if w % feat_width != 0 || h % feat_height != 0 || w / feat_width != h / feat_height {
            return contract(format!(
                "feature map {feat_width}x{feat_height} is not an integer downsampling of {w}x{h}"
            ));
        }
        let stride = (w / feat_width) as f64;
        let nbins = bin_edges.len() - 1;
        let mut samples = Vec::new();
        let mut hits = vec![0.0f32; meta.num_voxels()];
        for v in 0..feat_height {
            for u in 0..feat_width {
                let pix = v * feat_width + u;
                for b in 0..nbins {
                    let depth = 0.5 * (bin_edges[b] as f64 + bin_edges[b + 1] as f64);
                    let p = camera.backproject((u as f64 + 0.5) * stride, (v as f64 + 0.5) * stride, depth);
                    if let Some(idx) = meta.locate(p) {
                        let vox = meta.flat(idx);
                        samples.push((pix as u32, b as u32, vox as u32));
                        hits[vox] += 1.0;
                    }
                }
            }
        }
        Ok(Self { feat_width, feat_height, nbins, samples, hits })
    }
}

/// Output of [`lift_scatter`].
#[derive(Debug, Clone)]
pub struct FrustumVolume {
    /// `feature · prob` for every pixel and bin, `[C, nbins, H', W']`.
    pub frustum: Tensor,
    /// Hit-count-normalized scatter target, `[C, nz, ny, nx]`.
    pub volume: Tensor,
    /// Samples accumulated into each voxel.
    pub hits: Vec<f32>,
    /// Set when no depth bin of any pixel intersects the grid.
    pub empty: bool,
}

fn check_scatter(features: &Tensor, dp: &DepthProbVolume, map: &FrustumMap) -> Result<usize> {
    let c = match features.shape[..] {
        [c, h, w] | [c, 1, h, w] if h == dp.height && w == dp.width => c,
        _ => {
            return contract(format!(
                "features {:?} do not match the {}x{} depth distribution",
                features.shape, dp.width, dp.height
            ))
        }
    };
    if (map.feat_width, map.feat_height, map.nbins) != (dp.width, dp.height, dp.nbins) {
        return contract("frustum map was built for a different feature map or binning");
    }
    Ok(c)
}

/// Lift-splat with a precomputed [`FrustumMap`].
pub fn lift_scatter_with(features: &Tensor, dp: &DepthProbVolume, map: &FrustumMap, meta: &GridMeta) -> Result<FrustumVolume> {
    let c = check_scatter(features, dp, map)?;
    let hw = dp.width * dp.height;
    let nb = dp.nbins;
    let nvox = meta.num_voxels();
    if map.hits.len() != nvox {
        return contract("frustum map was built for a different grid");
    }
    let mut frustum = Tensor::zeros(&[c, nb, dp.height, dp.width]);
    for ch in 0..c {
        for pix in 0..hw {
            let f = features.data[ch * hw + pix];
            for b in 0..nb {
                frustum.data[(ch * nb + b) * hw + pix] = f * dp.probs.data[pix * nb + b];
            }
        }
    }
    let mut volume = Tensor::zeros(&[c, meta.dims[2], meta.dims[1], meta.dims[0]]);
    for &(pix, b, vox) in &map.samples {
        let (pix, b, vox) = (pix as usize, b as usize, vox as usize);
        let inv = 1.0 / map.hits[vox];
        for ch in 0..c {
            volume.data[ch * nvox + vox] += frustum.data[(ch * nb + b) * hw + pix] * inv;
        }
    }
    Ok(FrustumVolume { frustum, volume, hits: map.hits.clone(), empty: map.samples.is_empty() })
}

/// Gradients of [`lift_scatter_with`] with respect to the features
/// (`[C, H', W']`) and the depth probabilities (`[H', W', nbins]`).
pub fn lift_scatter_backward(
    features: &Tensor,
    dp: &DepthProbVolume,
    map: &FrustumMap,
    grad_volume: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let c = check_scatter(features, dp, map)?;
    let hw = dp.width * dp.height;
    let nb = dp.nbins;
    let nvox = map.hits.len();
    let mut g_feat = Tensor::zeros(&[c, dp.height, dp.width]);
    let mut g_prob = Tensor::zeros(&dp.probs.shape);
    for &(pix, b, vox) in &map.samples {
        let (pix, b, vox) = (pix as usize, b as usize, vox as usize);
        let inv = 1.0 / map.hits[vox];
        let p = dp.probs.data[pix * nb + b];
        let mut gp = 0.0f32;
        for ch in 0..c {
            let g = grad_volume.data[ch * nvox + vox] * inv;
            g_feat.data[ch * hw + pix] += g * p;
            gp += g * features.data[ch * hw + pix];
        }
        g_prob.data[pix * nb + b] += gp;
    }
    Ok((g_feat, g_prob))
}

/// Lifts `features` (`[C, H', W']`) into the grid through the depth
/// distribution `dp`, averaging the samples that land in each voxel.
pub fn lift_scatter(features: &Tensor, dp: &DepthProbVolume, meta: &GridMeta, camera: &CameraModel) -> Result<FrustumVolume> {
    let map = FrustumMap::build(dp.width, dp.height, &dp.bin_edges, meta, camera)?;
    lift_scatter_with(features, dp, &map, meta)
}

// ---------------------------------------------------------------------------
// Trilinear sampling

/// Corner indices and weights of one trilinear lookup, plus the
/// derivative of each weight along each axis.
struct Stencil {
    idx: [usize; 8],
    w: [f32; 8],
    dw: [[f32; 3]; 8],
}

/// Point in continuous voxel coordinates `(x, y, z)`; voxel centers at
/// integers. Coordinates are clamped to the border, where the coordinate
/// gradient vanishes.
#[inline]
fn stencil(p: [f32; 3], dims: [usize; 3]) -> Stencil {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut f = [0f32; 3];
    let mut live = [0f32; 3];
    for a in 0..3 {
        let n = dims[a];
        let max = (n - 1) as f32;
        let q = p[a].clamp(0.0, max);
        live[a] = if p[a] > 0.0 && p[a] < max { 1.0 } else { 0.0 };
        if n == 1 {
            lo[a] = 0;
            hi[a] = 0;
            f[a] = 0.0;
            live[a] = 0.0;
            continue;
        }
        let i0 = (q.floor() as usize).min(n - 2);
        lo[a] = i0;
        hi[a] = i0 + 1;
        f[a] = q - i0 as f32;
    }
    let mut s = Stencil { idx: [0; 8], w: [0.0; 8], dw: [[0.0; 3]; 8] };
    for k in 0..8 {
        let bits = [k & 1, (k >> 1) & 1, (k >> 2) & 1];
        let mut coord = [0usize; 3];
        let mut ws = [0f32; 3];
        let mut ds = [0f32; 3];
        for a in 0..3 {
            if bits[a] == 1 {
                coord[a] = hi[a];
                ws[a] = f[a];
                ds[a] = live[a];
            } else {
                coord[a] = lo[a];
                ws[a] = 1.0 - f[a];
                ds[a] = -live[a];
            }
        }
        s.idx[k] = coord[0] + dims[0] * (coord[1] + dims[1] * coord[2]);
        s.w[k] = ws[0] * ws[1] * ws[2];
        s.dw[k] = [ds[0] * ws[1] * ws[2], ws[0] * ds[1] * ws[2], ws[0] * ws[1] * ds[2]];
    }
    s
}

fn volume_dims(volume: &Tensor) -> Result<(usize, [usize; 3])> {
    match volume.shape[..] {
        [c, nz, ny, nx] => Ok((c, [nx, ny, nz])),
        _ => contract(format!("volume must be [C, nz, ny, nx], got {:?}", volume.shape)),
    }
}

/// Trilinear interpolation of `volume` at `points` (`(x, y, z)` voxel
/// coordinates). Returns `[C, npts]`.
pub fn trilinear_sample(volume: &Tensor, points: &[[f32; 3]]) -> Result<Tensor> {
    let (c, dims) = volume_dims(volume)?;
    let nvox = dims.iter().product::<usize>();
    let n = points.len();
    let mut out = Tensor::zeros(&[c, n]);
    for (j, &p) in points.iter().enumerate() {
        let s = stencil(p, dims);
        for ch in 0..c {
            let plane = &volume.data[ch * nvox..(ch + 1) * nvox];
            let mut acc = 0.0;
            for k in 0..8 {
                acc += s.w[k] * plane[s.idx[k]];
            }
            out.data[ch * n + j] = acc;
        }
    }
    Ok(out)
}

/// Gradients of [`trilinear_sample`] with respect to the volume and to the
/// point coordinates.
pub fn trilinear_backward(volume: &Tensor, points: &[[f32; 3]], grad_out: &Tensor) -> Result<(Tensor, Vec<[f32; 3]>)> {
    let (c, dims) = volume_dims(volume)?;
    let nvox = dims.iter().product::<usize>();
    let n = points.len();
    if grad_out.shape != [c, n] {
        return contract("grad_out must be [C, npts]");
    }
    let mut g_vol = Tensor::zeros(&volume.shape);
    let mut g_pts = vec![[0.0f32; 3]; n];
    for (j, &p) in points.iter().enumerate() {
        let s = stencil(p, dims);
        for ch in 0..c {
            let g = grad_out.data[ch * n + j];
            if g == 0.0 {
                continue;
            }
            let base = ch * nvox;
            for k in 0..8 {
                g_vol.data[base + s.idx[k]] += s.w[k] * g;
                let v = volume.data[base + s.idx[k]] * g;
                for a in 0..3 {
                    g_pts[j][a] += s.dw[k][a] * v;
                }
            }
        }
    }
    Ok((g_vol, g_pts))
}

// ---------------------------------------------------------------------------
// Deformable refinement

/// Learned-offset refinement: each query voxel predicts `K` offsets and `K`
/// attention logits from its own features (1x1x1 convolutions), samples the
/// lifted volume at `query + offset`, and adds the attention-weighted
/// samples to its features.
#[derive(Debug, Clone)]
pub struct Deform3d {
    /// `C -> 3K` offsets, channel `3k + a` is sample `k` along axis `a`.
    pub offset_head: Conv3d,
    /// `C -> K` attention logits.
    pub attn_head: Conv3d,
    pub samples: usize,
    cache: Option<DeformCache>,
}

#[derive(Debug, Clone)]
struct DeformCache {
    lifted: Tensor,
    points: Vec<Vec<[f32; 3]>>,
    sampled: Vec<Tensor>,
    weights: Tensor,
}

impl Deform3d {
    /// Both heads start at zero: offsets vanish and attention is uniform.
    pub fn new(name: &str, channels: usize, samples: usize, rng: &mut impl Rng) -> Self {
        let mut offset_head = Conv3d::same(&format!("{name}.offset"), channels, 3 * samples, 1, rng);
        let mut attn_head = Conv3d::same(&format!("{name}.attn"), channels, samples, 1, rng);
        offset_head.zero_weights();
        attn_head.zero_weights();
        Self { offset_head, attn_head, samples, cache: None }
    }

    fn sample_points(offsets: &Tensor, k: usize, dims: [usize; 3]) -> Vec<[f32; 3]> {
        let nvox = dims.iter().product::<usize>();
        (0..nvox)
            .map(|v| {
                let x = (v % dims[0]) as f32;
                let y = ((v / dims[0]) % dims[1]) as f32;
                let z = (v / (dims[0] * dims[1])) as f32;
                [
                    x + offsets.data[(3 * k) * nvox + v],
                    y + offsets.data[(3 * k + 1) * nvox + v],
                    z + offsets.data[(3 * k + 2) * nvox + v],
                ]
            })
            .collect()
    }

    fn run(&mut self, f3d: &Tensor, lifted: &Tensor, train: bool) -> Result<(Tensor, DeformCache)> {
        if f3d.shape != lifted.shape {
            return contract(format!("f3d {:?} and lifted {:?} differ in shape", f3d.shape, lifted.shape));
        }
        let (c, dims) = volume_dims(f3d)?;
        if self.offset_head.weight.value.shape[1] != c {
            return contract("deformable heads were built for a different channel count");
        }
        let nvox = dims.iter().product::<usize>();
        let (offsets, logits) = if train {
            (self.offset_head.forward(f3d)?, self.attn_head.forward(f3d)?)
        } else {
            (self.offset_head.apply(f3d)?, self.attn_head.apply(f3d)?)
        };
        let weights = crate::nn::softmax_channels(&logits);
        let mut out = f3d.clone();
        out.grad = None;
        let mut points = Vec::with_capacity(self.samples);
        let mut sampled = Vec::with_capacity(self.samples);
        for k in 0..self.samples {
            let pts = Self::sample_points(&offsets, k, dims);
            let s = trilinear_sample(lifted, &pts)?;
            let wk = &weights.data[k * nvox..(k + 1) * nvox];
            for ch in 0..c {
                let o = &mut out.data[ch * nvox..(ch + 1) * nvox];
                for (v, ov) in o.iter_mut().enumerate() {
                    *ov += wk[v] * s.data[ch * nvox + v];
                }
            }
            points.push(pts);
            sampled.push(s);
        }
        Ok((out, DeformCache { lifted: lifted.clone(), points, sampled, weights }))
    }

    pub fn forward(&mut self, f3d: &Tensor, lifted: &Tensor) -> Result<Tensor> {
        let (out, cache) = self.run(f3d, lifted, true)?;
        self.cache = Some(cache);
        Ok(out)
    }

    pub fn apply(&mut self, f3d: &Tensor, lifted: &Tensor) -> Result<Tensor> {
        Ok(self.run(f3d, lifted, false)?.0)
    }

    /// Returns `(grad_f3d, grad_lifted)` and accumulates head gradients.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
        let cache = self.cache.take().ok_or_else(|| crate::Error::Contract("backward before forward".into()))?;
        let (c, dims) = volume_dims(grad_out)?;
        let nvox = dims.iter().product::<usize>();
        let kk = self.samples;
        let mut g_lifted = Tensor::zeros(&cache.lifted.shape);
        let mut g_offsets = Tensor::zeros(&[3 * kk, dims[2], dims[1], dims[0]]);
        let mut g_weights = Tensor::zeros(&[kk, dims[2], dims[1], dims[0]]);
        for k in 0..kk {
            let wk = &cache.weights.data[k * nvox..(k + 1) * nvox];
            let s = &cache.sampled[k];
            let mut g_s = Tensor::zeros(&[c, nvox]);
            for ch in 0..c {
                for v in 0..nvox {
                    let g = grad_out.data[ch * nvox + v];
                    g_s.data[ch * nvox + v] = wk[v] * g;
                    g_weights.data[k * nvox + v] += g * s.data[ch * nvox + v];
                }
            }
            let (gl, gp) = trilinear_backward(&cache.lifted, &cache.points[k], &g_s)?;
            for (a, b) in g_lifted.data.iter_mut().zip(&gl.data) {
                *a += b;
            }
            for (v, g) in gp.iter().enumerate() {
                for a in 0..3 {
                    g_offsets.data[(3 * k + a) * nvox + v] = g[a];
                }
            }
        }
        let g_logits = crate::nn::softmax_channels_backward(&cache.weights, &g_weights);
        let g1 = self.offset_head.backward(&g_offsets, true)?.expect("input grad requested");
        let g2 = self.attn_head.backward(&g_logits, true)?.expect("input grad requested");
        let mut g_f3d = grad_out.clone();
        for ((a, b), d) in g_f3d.data.iter_mut().zip(&g1.data).zip(&g2.data) {
            *a += b + d;
        }
        Ok((g_f3d, g_lifted))
    }
}

impl Module for Deform3d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        self.offset_head.visit(f);
        self.attn_head.visit(f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.offset_head.visit_mut(f);
        self.attn_head.visit_mut(f);
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::RigidTransform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roi_constant_and_global_max() {
        let feats = Tensor::full(&[2, 5, 6], 3.5);
        let r = roi_pool(&feats, &PixelRect { x0: 1.2, y0: 0.5, x1: 4.0, y1: 3.3 }, (2, 3)).unwrap();
        assert!(r.output.data.iter().all(|&v| v == 3.5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let feats = Tensor::uniform(&[3, 4, 5], 1.0, &mut rng);
        let r = roi_pool(&feats, &PixelRect { x0: 0.0, y0: 0.0, x1: 5.0, y1: 4.0 }, (1, 1)).unwrap();
        for c in 0..3 {
            let m = feats.channel(c).iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            assert_eq!(r.output.data[c], m);
        }
    }

    #[test]
    fn roi_ramp_two_by_two() {
        let feats = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let r = roi_pool(&feats, &PixelRect { x0: 0.0, y0: 0.0, x1: 4.0, y1: 4.0 }, (2, 2)).unwrap();
        assert_eq!(r.output.data, vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn roi_degenerate_box_is_zero() {
        let feats = Tensor::full(&[1, 4, 4], 1.0);
        let r = roi_pool(&feats, &PixelRect { x0: 2.0, y0: 1.0, x1: 2.0, y1: 3.0 }, (1, 1)).unwrap();
        assert_eq!(r.output.data, vec![0.0]);
        assert_eq!(r.argmax, vec![None]);
    }

    #[test]
    fn roi_voxel_batch_matches_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = Tensor::uniform(&[2, 6, 7], 1.0, &mut rng);
        let rects = [
            PixelRect { x0: 0.3, y0: 1.2, x1: 2.9, y1: 4.0 },
            PixelRect { x0: 5.5, y0: 5.1, x1: 6.2, y1: 5.9 },
        ];
        let windows: Vec<_> = rects.iter().map(|r| PixelWindow::covering(r, 7, 6)).collect();
        let (batch, _) = roi_pool_voxels(&feats, &windows).unwrap();
        for (v, r) in rects.iter().enumerate() {
            let single = roi_pool(&feats, r, (1, 1)).unwrap();
            for c in 0..2 {
                assert_eq!(batch.data[c * 2 + v], single.output.data[c]);
            }
        }
    }

    fn toy_camera() -> (GridMeta, CameraModel) {
        let meta = GridMeta::new([-2.0, -2.0, 1.0], 0.5, [8, 8, 4]).unwrap();
        let cam = CameraModel::new(4.0, 4.0, 2.0, 2.0, RigidTransform::identity(), (4, 4)).unwrap();
        (meta, cam)
    }

    /// Brute-force triple loop over (pixel, bin, channel), sharing no code
    /// with the scatter kernel.
    fn scatter_oracle(features: &Tensor, dp: &DepthProbVolume, meta: &GridMeta, cam: &CameraModel) -> Vec<f64> {
        let c = features.shape[0];
        let (w, h) = (dp.width, dp.height);
        let stride = cam.image_size.0 as f64 / w as f64;
        let nvox = meta.num_voxels();
        let mut sum = vec![0.0f64; c * nvox];
        let mut hits = vec![0.0f64; nvox];
        for v in 0..h {
            for u in 0..w {
                for b in 0..dp.nbins {
                    let depth = (dp.bin_edges[b] as f64 + dp.bin_edges[b + 1] as f64) / 2.0;
                    let xc = ((u as f64 + 0.5) * stride - cam.cx) / cam.fx * depth;
                    let yc = ((v as f64 + 0.5) * stride - cam.cy) / cam.fy * depth;
                    // identity pose: camera frame is the world frame
                    let p = [xc, yc, depth];
                    let mut idx = [0usize; 3];
                    let mut inside = true;
                    for a in 0..3 {
                        let f = ((p[a] - meta.origin[a] as f64) / meta.voxel_size as f64).floor();
                        if f < 0.0 || f >= meta.dims[a] as f64 {
                            inside = false;
                        } else {
                            idx[a] = f as usize;
                        }
                    }
                    if !inside {
                        continue;
                    }
                    let vox = idx[0] + 8 * (idx[1] + 8 * idx[2]);
                    hits[vox] += 1.0;
                    for ch in 0..c {
                        sum[ch * nvox + vox] += features.data[(ch * h + v) * w + u] as f64 * dp.probs.data[(v * w + u) * dp.nbins + b] as f64;
                    }
                }
            }
        }
        (0..c * nvox).map(|i| if hits[i % nvox] > 0.0 { sum[i] / hits[i % nvox] } else { 0.0 }).collect()
    }

    fn random_dp(w: usize, h: usize, edges: Vec<f32>, rng: &mut impl Rng) -> DepthProbVolume {
        let nb = edges.len() - 1;
        let mut logits = Tensor::uniform(&[nb, h, w], 2.0, rng);
        logits.data.iter_mut().for_each(|v| *v *= 1.0);
        DepthProbVolume::from_logits(edges, &logits).unwrap()
    }

    #[test]
    fn scatter_matches_triple_loop() {
        let (meta, cam) = toy_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let feats = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);
        let dp = random_dp(4, 4, vec![1.0, 1.7, 2.4, 3.0], &mut rng);
        let vol = lift_scatter(&feats, &dp, &meta, &cam).unwrap();
        let want = scatter_oracle(&feats, &dp, &meta, &cam);
        assert!(!vol.empty);
        for (g, w) in vol.volume.data.iter().zip(&want) {
            assert!((*g as f64 - w).abs() < 1e-5);
        }
    }

    #[test]
    fn scatter_one_hot_and_split() {
        let (meta, cam) = toy_camera();
        let feats = Tensor::full(&[1, 4, 4], 2.0);
        let edges = vec![1.0, 2.0, 3.0];
        let mut probs = Tensor::zeros(&[4, 4, 2]);
        for pix in 0..16 {
            probs.data[pix * 2 + 1] = 1.0;
        }
        let dp = DepthProbVolume::new(4, 4, edges.clone(), probs).unwrap();
        let vol = lift_scatter(&feats, &dp, &meta, &cam).unwrap();
        // every landed sample is at depth 2.5 (bin 1), nothing at 1.5
        for (v, &hv) in vol.hits.iter().enumerate() {
            if hv > 0.0 {
                let z = meta.unflat(v)[2];
                let depth = meta.center_unchecked(meta.unflat(v))[2];
                assert!(depth > 1.0, "z index {z}");
            }
        }
        let mass: f64 = vol.volume.data.iter().zip(&vol.hits).map(|(&a, &h)| (a * h) as f64).sum();
        // bin 1 samples that land (depth 2.5); bin 0 samples carry zero weight
        let landed_bin1 = vol.hits.iter().sum::<f32>() as f64;
        assert!(mass > 0.0 && mass <= 2.0 * landed_bin1 + 1e-6);

        let uniform = DepthProbVolume::new(4, 4, edges, Tensor::full(&[4, 4, 2], 0.5)).unwrap();
        let map = FrustumMap::build(4, 4, &uniform.bin_edges, &meta, &cam).unwrap();
        let vol = lift_scatter_with(&feats, &uniform, &map, &meta).unwrap();
        for &(_, _, vox) in &map.samples {
            // each sample carries half of the pixel's feature
            assert!((vol.volume.data[vox as usize] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scatter_conserves_mass() {
        let (meta, cam) = toy_camera();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Tensor::uniform(&[3, 4, 4], 1.0, &mut rng);
        let dp = random_dp(4, 4, DepthProbVolume::uniform_edges(0.5, 4.0, 6), &mut rng);
        let map = FrustumMap::build(4, 4, &dp.bin_edges, &meta, &cam).unwrap();
        let vol = lift_scatter_with(&feats, &dp, &map, &meta).unwrap();
        let nvox = meta.num_voxels();
        for ch in 0..3 {
            let got: f64 = (0..nvox).map(|v| (vol.volume.data[ch * nvox + v] * vol.hits[v]) as f64).sum();
            let want: f64 = map
                .samples
                .iter()
                .map(|&(pix, b, _)| vol.frustum.data[(ch * 6 + b as usize) * 16 + pix as usize] as f64)
                .sum();
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1.0));
        }
    }

    #[test]
    fn scatter_outside_grid_flags_empty() {
        let (meta, cam) = toy_camera();
        let feats = Tensor::full(&[1, 4, 4], 1.0);
        let dp = DepthProbVolume::new(4, 4, vec![50.0, 60.0], Tensor::full(&[4, 4, 1], 1.0)).unwrap();
        let vol = lift_scatter(&feats, &dp, &meta, &cam).unwrap();
        assert!(vol.empty);
        assert!(vol.volume.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn trilinear_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let vol = Tensor::uniform(&[2, 3, 4, 5], 1.0, &mut rng);
        let nvox = 60;
        let s = trilinear_sample(&vol, &[[2.0, 1.0, 2.0], [2.5, 1.0, 2.0], [-3.0, 1.0, 2.0]]).unwrap();
        let at = |c: usize, x: usize, y: usize, z: usize| vol.data[c * nvox + x + 5 * (y + 4 * z)];
        for c in 0..2 {
            assert!((s.data[c * 3] - at(c, 2, 1, 2)).abs() < 1e-6);
            assert!((s.data[c * 3 + 1] - 0.5 * (at(c, 2, 1, 2) + at(c, 3, 1, 2))).abs() < 1e-6);
            assert!((s.data[c * 3 + 2] - at(c, 0, 1, 2)).abs() < 1e-6);
        }
    }

    #[test]
    fn deform_zero_init_is_residual_lookup() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f3d = Tensor::uniform(&[3, 4, 4, 4], 1.0, &mut rng);
        let lifted = Tensor::uniform(&[3, 4, 4, 4], 1.0, &mut rng);
        for k in [1, 4] {
            let mut d = Deform3d::new("d", 3, k, &mut rng);
            let out = d.forward(&f3d, &lifted).unwrap();
            for i in 0..out.len() {
                assert!((out.data[i] - (f3d.data[i] + lifted.data[i])).abs() < 1e-6);
            }
            let out = d.forward(&f3d, &Tensor::zeros(&[3, 4, 4, 4])).unwrap();
            assert_eq!(out.data, f3d.data);
        }
        let mut d = Deform3d::new("d", 3, 2, &mut rng);
        assert!(d.forward(&f3d, &Tensor::zeros(&[3, 4, 4, 2])).is_err());
    }
}
