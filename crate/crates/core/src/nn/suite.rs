//! Finite-difference checks of every differentiable operation on several
//! random shapes. Used by the `gradcheck` subcommand and the test suite.
//!
//! Each op is reduced to a scalar `<probe, op(x)>` (losses are already
//! scalar) and its hand-written backward is compared with central
//! differences in single precision. Linear ops use large steps, which are
//! exact in exact arithmetic and keep f32 rounding out of the quotient;
//! curved ops use a Richardson-extrapolated quotient for the same reason;
//! piecewise ops keep their inputs away from kinks by more than the step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::{conv3d, conv3d_backward_input, conv3d_backward_weight, conv_transpose3d};
use super::gradcheck::{dot64, grad_check_f32, grad_check_f32_extrapolated, probe_vector, GradCheck};
use super::loss::{affinity_loss, depth_loss, weighted_ce_loss, AffinityMode};
use super::norm::{ada_bn, ada_bn_backward, batch_norm, batch_norm_backward, NoiseEmbedding, NormMode};
use super::{relu, relu_backward, softmax_channels, softmax_channels_backward, Conv3d, ConvTranspose3d, Module, BN_EPS};
use crate::error::Result;
use crate::grid::{CameraModel, DepthMap, GridMeta, PixelRect};
use crate::lifting::{
    lift_scatter_backward, lift_scatter_with, roi_pool, roi_pool_backward, trilinear_backward, trilinear_sample, Deform3d,
    DepthProbVolume, FrustumMap,
};
use crate::tensor::Tensor;

/// Tolerance on the relative error of every check.
pub const SUITE_TOLERANCE: f64 = 1e-3;

/// One op, one shape, one differentiated argument.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub op: &'static str,
    pub wrt: &'static str,
    pub shape: Vec<usize>,
    pub check: GradCheck,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.check.max_rel_error < SUITE_TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

fn with(x: &Tensor, data: &[f32]) -> Tensor {
    Tensor::from_vec(&x.shape, data.to_vec()).expect("same shape")
}

/// Values in `[-1, 1]` spaced at least `gap` apart and at least `gap` from
/// zero, in random order.
fn separated(shape: &[usize], gap: f32, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 + 1.0) * gap * if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::from_vec(shape, vals).expect("shape matches")
}

fn entry(op: &'static str, wrt: &'static str, shape: &[usize], check: GradCheck) -> SuiteEntry {
    SuiteEntry { op, wrt, shape: shape.to_vec(), check }
}

const LINEAR_STEP: f32 = 0.5;
const SMOOTH_STEP: f32 = 1e-2;
/// Nonlinear ops evaluated in f32 use the extrapolated quotient with this
/// step.
const CURVED_STEP: f32 = 8e-2;


fn check_conv(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let cases: [([usize; 4], usize, [usize; 3], [usize; 3], [usize; 3]); 3] = [
        ([2, 3, 4, 5], 3, [3, 3, 3], [1, 1, 1], [1, 1, 1]),
        ([3, 4, 4, 4], 2, [2, 2, 2], [2, 2, 2], [0, 0, 0]),
        ([1, 1, 6, 7], 4, [1, 3, 3], [1, 2, 2], [0, 1, 1]),
    ];
    for (shape, cout, k, stride, pad) in cases {
        let x = rand_tensor(&shape, rng);
        let w = rand_tensor(&[cout, shape[0], k[0], k[1], k[2]], rng);
        let b: Vec<f32> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y = conv3d(&x, &w, Some(&b), stride, pad)?;
        let probe = probe_vector(y.len(), rng.gen());
        let g = Tensor::from_vec(&y.shape, probe.clone())?;
        let gx = conv3d_backward_input(&g, &w, [shape[1], shape[2], shape[3]], stride, pad)?;
        let (gw, gb) = conv3d_backward_weight(&x, &g, k, stride, pad)?;
        let fx = |d: &[f32]| dot64(&probe, &conv3d(&with(&x, d), &w, Some(&b), stride, pad).unwrap().data);
        out.push(entry("conv3d", "input", &shape, grad_check_f32(fx, &x.data, &gx.data, LINEAR_STEP)));
        let fw = |d: &[f32]| dot64(&probe, &conv3d(&x, &with(&w, d), Some(&b), stride, pad).unwrap().data);
        out.push(entry("conv3d", "weight", &shape, grad_check_f32(fw, &w.data, &gw.data, LINEAR_STEP)));
        let fb = |d: &[f32]| dot64(&probe, &conv3d(&x, &w, Some(d), stride, pad).unwrap().data);
        out.push(entry("conv3d", "bias", &shape, grad_check_f32(fb, &b, &gb, LINEAR_STEP)));
    }
    Ok(())
}

fn check_conv_layers(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for shape in [[2usize, 2, 4, 4], [3, 4, 2, 6], [1, 2, 2, 2]] {
        let mut layer = ConvTranspose3d::new("t", shape[0], 2, [2, 2, 2], rng);
        let x = rand_tensor(&shape, rng);
        let y = layer.forward(&x)?;
        let probe = probe_vector(y.len(), rng.gen());
        let gx = layer.backward(&Tensor::from_vec(&y.shape, probe.clone())?)?;
        let w = layer.weight.value.clone();
        let gw = layer.weight.grad.clone();
        let f = |d: &[f32]| dot64(&probe, &conv_transpose3d(&with(&x, d), &w, Some(&layer.bias.value.data), [2; 3], [0; 3], [y.shape[1], y.shape[2], y.shape[3]]).unwrap().data);
        out.push(entry("conv_transpose3d", "input", &shape, grad_check_f32(f, &x.data, &gx.data, LINEAR_STEP)));
        let f = |d: &[f32]| dot64(&probe, &conv_transpose3d(&x, &with(&w, d), Some(&layer.bias.value.data), [2; 3], [0; 3], [y.shape[1], y.shape[2], y.shape[3]]).unwrap().data);
        out.push(entry("conv_transpose3d", "weight", &shape, grad_check_f32(f, &w.data, &gw, LINEAR_STEP)));

        let mut conv = Conv3d::same("c", shape[0], 3, 3, rng);
        let y = conv.forward(&x)?;
        let probe = probe_vector(y.len(), rng.gen());
        conv.zero_grad();
        let gx = conv.backward(&Tensor::from_vec(&y.shape, probe.clone())?, true)?.expect("input grad");
        let f = |d: &[f32]| dot64(&probe, &conv.apply(&with(&x, d)).unwrap().data);
        out.push(entry("conv3d_layer", "input", &shape, grad_check_f32(f, &x.data, &gx.data, LINEAR_STEP)));
    }
    Ok(())
}

fn check_norms(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for shape in [[2usize, 2, 3, 3], [4, 1, 2, 5], [3, 2, 2, 2]] {
        let c = shape[0];
        let x = rand_tensor(&shape, rng);
        let gamma: Vec<f32> = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
        let beta: Vec<f32> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let (y, cache) = batch_norm(&x, &gamma, &beta, BN_EPS, None, NormMode::BatchStats)?;
        let probe = probe_vector(y.len(), rng.gen());
        let (gx, gg, gb) = batch_norm_backward(&cache, &Tensor::from_vec(&y.shape, probe.clone())?)?;
        let bn = |x: &Tensor, g: &[f32], b: &[f32]| batch_norm(x, g, b, BN_EPS, None, NormMode::BatchStats).unwrap().0;
        let f = |d: &[f32]| dot64(&probe, &bn(&with(&x, d), &gamma, &beta).data);
        out.push(entry("batch_norm", "input", &shape, grad_check_f32_extrapolated(f, &x.data, &gx.data, CURVED_STEP)));
        let f = |d: &[f32]| dot64(&probe, &bn(&x, d, &beta).data);
        out.push(entry("batch_norm", "gamma", &shape, grad_check_f32(f, &gamma, &gg, LINEAR_STEP)));
        let f = |d: &[f32]| dot64(&probe, &bn(&x, &gamma, d).data);
        out.push(entry("batch_norm", "beta", &shape, grad_check_f32(f, &beta, &gb, LINEAR_STEP)));

        let levels = 3;
        let t = rng.gen_range(0..levels);
        let mut embed = NoiseEmbedding::new("e", levels, c);
        embed.table.value = Tensor::uniform(&[levels, 2 * c], 1.0, rng);
        let (y, cache) = ada_bn(&x, &embed, t, BN_EPS)?;
        let probe = probe_vector(y.len(), rng.gen());
        let gx = ada_bn_backward(&cache, &Tensor::from_vec(&y.shape, probe.clone())?, &mut embed, t)?;
        let table = embed.table.value.clone();
        let gt = embed.table.grad.clone();
        let f = |d: &[f32]| dot64(&probe, &ada_bn(&with(&x, d), &embed, t, BN_EPS).unwrap().0.data);
        out.push(entry("ada_bn", "input", &shape, grad_check_f32_extrapolated(f, &x.data, &gx.data, CURVED_STEP)));
        let f = |d: &[f32]| {
            let mut e = embed.clone();
            e.table.value = with(&table, d);
            dot64(&probe, &ada_bn(&x, &e, t, BN_EPS).unwrap().0.data)
        };
        out.push(entry("ada_bn", "embedding", &shape, grad_check_f32(f, &table.data, &gt, LINEAR_STEP)));
    }
    Ok(())
}

fn check_activations(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for shape in [[3usize, 7], [5, 4], [2, 11]] {
        let x = separated(&shape, 0.05, rng);
        let y = relu(&x);
        let probe = probe_vector(y.len(), rng.gen());
        let gx = relu_backward(&y, &Tensor::from_vec(&shape, probe.clone())?);
        let f = |d: &[f32]| dot64(&probe, &relu(&with(&x, d)).data);
        out.push(entry("relu", "input", &shape, grad_check_f32(f, &x.data, &gx.data, SMOOTH_STEP)));

        let x = rand_tensor(&shape, rng);
        let p = softmax_channels(&x);
        let probe = probe_vector(p.len(), rng.gen());
        let gx = softmax_channels_backward(&p, &Tensor::from_vec(&shape, probe.clone())?);
        let f = |d: &[f32]| dot64(&probe, &softmax_channels(&with(&x, d)).data);
        out.push(entry("softmax", "input", &shape, grad_check_f32_extrapolated(f, &x.data, &gx.data, CURVED_STEP)));
    }
    Ok(())
}

fn check_roi_pool(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    let cases = [
        ([2usize, 6, 8], PixelRect { x0: 0.5, y0: 1.0, x1: 7.0, y1: 5.5 }, (2, 3)),
        ([3, 5, 5], PixelRect { x0: 0.0, y0: 0.0, x1: 5.0, y1: 5.0 }, (1, 1)),
        ([1, 9, 4], PixelRect { x0: 1.2, y0: 2.0, x1: 3.9, y1: 8.7 }, (3, 2)),
    ];
    for (shape, rect, cells) in cases {
        let x = separated(&shape, 1.0 / (shape.iter().product::<usize>() as f32 + 1.0), rng);
        let step = 0.2 / (shape.iter().product::<usize>() as f32 + 1.0);
        let pooled = roi_pool(&x, &rect, cells)?;
        let probe = probe_vector(pooled.output.len(), rng.gen());
        let gx = roi_pool_backward(&pooled, &Tensor::from_vec(&pooled.output.shape, probe.clone())?, &shape);
        let f = |d: &[f32]| dot64(&probe, &roi_pool(&with(&x, d), &rect, cells).unwrap().output.data);
        out.push(entry("roi_pool", "features", &shape, grad_check_f32(f, &x.data, &gx.data, step)));
    }
    Ok(())
}

/// Points whose coordinates stay at least `margin` away from integers.
fn off_grid_points(n: usize, dims: [usize; 3], margin: f32, rng: &mut ChaCha8Rng) -> Vec<[f32; 3]> {
    (0..n)
        .map(|_| {
            let mut p = [0.0; 3];
            for a in 0..3 {
                let cell = rng.gen_range(0..dims[a].max(2) - 1) as f32;
                p[a] = cell + rng.gen_range(margin..1.0 - margin);
            }
            p
        })
        .collect()
}

fn check_trilinear(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (shape, npts) in [([2usize, 3, 4, 5], 7usize), ([1, 2, 2, 2], 4), ([3, 4, 3, 2], 9)] {
        let dims = [shape[3], shape[2], shape[1]];
        let v = rand_tensor(&shape, rng);
        let pts = off_grid_points(npts, dims, 0.1, rng);
        let y = trilinear_sample(&v, &pts)?;
        let probe = probe_vector(y.len(), rng.gen());
        let (gv, gp) = trilinear_backward(&v, &pts, &Tensor::from_vec(&y.shape, probe.clone())?)?;
        let f = |d: &[f32]| dot64(&probe, &trilinear_sample(&with(&v, d), &pts).unwrap().data);
        out.push(entry("trilinear_sample", "volume", &shape, grad_check_f32(f, &v.data, &gv.data, LINEAR_STEP)));
        let flat: Vec<f32> = pts.iter().flatten().copied().collect();
        let gflat: Vec<f32> = gp.iter().flatten().copied().collect();
        let f = |d: &[f32]| {
            let p: Vec<[f32; 3]> = d.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            dot64(&probe, &trilinear_sample(&v, &p).unwrap().data)
        };
        out.push(entry("trilinear_sample", "points", &shape, grad_check_f32(f, &flat, &gflat, 0.05)));
    }
    Ok(())
}

fn scatter_case(fw: usize, fh: usize, dims: [usize; 3]) -> Result<(GridMeta, FrustumMap, Vec<f32>)> {
    let meta = GridMeta::new([0.5, -(dims[1] as f32) * 0.25, -0.5], 0.5, dims)?;
    let cam = CameraModel::looking_along([0.0, 0.0, 0.6], [1.0, 0.05, -0.1], [0.0, 0.0, 1.0], 70.0, (fw * 2, fh * 2))?;
    let edges = DepthProbVolume::uniform_edges(0.5, 0.5 + dims[0] as f32 * 0.6, 6);
    let map = FrustumMap::build(fw, fh, &edges, &meta, &cam)?;
    Ok((meta, map, edges))
}

fn check_lift_scatter(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (c, fw, fh, dims) in [(2usize, 4usize, 3usize, [6usize, 6, 3]), (1, 6, 4, [8, 8, 2]), (3, 3, 3, [4, 5, 4])] {
        let (meta, map, edges) = scatter_case(fw, fh, dims)?;
        assert!(!map.samples.is_empty(), "scatter fixture must hit the grid");
        let feats = rand_tensor(&[c, fh, fw], rng);
        let logits = rand_tensor(&[edges.len() - 1, fh, fw], rng);
        let dp = DepthProbVolume::from_logits(edges.clone(), &logits)?;
        let lifted = lift_scatter_with(&feats, &dp, &map, &meta)?;
        let probe = probe_vector(lifted.volume.len(), rng.gen());
        let (gf, gprob) = lift_scatter_backward(&feats, &dp, &map, &Tensor::from_vec(&lifted.volume.shape, probe.clone())?)?;
        let f = |d: &[f32]| dot64(&probe, &lift_scatter_with(&with(&feats, d), &dp, &map, &meta).unwrap().volume.data);
        let shape = [c, fh, fw];
        out.push(entry("lift_scatter", "features", &shape, grad_check_f32(f, &feats.data, &gf.data, LINEAR_STEP)));
        // probabilities are perturbed freely (the op is linear in them)
        let f = |d: &[f32]| {
            let mut q = dp.clone();
            q.probs.data.copy_from_slice(d);
            dot64(&probe, &lift_scatter_with(&feats, &q, &map, &meta).unwrap().volume.data)
        };
        out.push(entry("lift_scatter", "depth_probs", &shape, grad_check_f32(f, &dp.probs.data, &gprob.data, LINEAR_STEP)));
    }
    Ok(())
}

fn check_deform(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (shape, k) in [([2usize, 3, 4, 4], 2usize), ([3, 2, 3, 5], 3), ([1, 4, 2, 3], 1)] {
        let c = shape[0];
        let mut d = Deform3d::new("d", c, k, rng);
        // offsets near +0.5 keep every sample point inside its cell, away
        // from the kinks of trilinear interpolation
        d.offset_head.weight.value = Tensor::uniform(&d.offset_head.weight.value.shape, 0.05, rng);
        d.offset_head.bias.value = Tensor::full(&[3 * k], 0.5);
        d.attn_head.weight.value = Tensor::uniform(&d.attn_head.weight.value.shape, 1.0, rng);
        let f3d = rand_tensor(&shape, rng);
        let lifted = rand_tensor(&shape, rng);
        let y = d.forward(&f3d, &lifted)?;
        let probe = probe_vector(y.len(), rng.gen());
        d.zero_grad();
        let (gf, gl) = d.backward(&Tensor::from_vec(&y.shape, probe.clone())?)?;
        let net = d.clone();
        let run = |n: &Deform3d, q: &Tensor, l: &Tensor| dot64(&probe, &n.clone().apply(q, l).unwrap().data);
        let f = |x: &[f32]| run(&net, &f3d, &with(&lifted, x));
        out.push(entry("deform3d_refine", "lifted", &shape, grad_check_f32(f, &lifted.data, &gl.data, LINEAR_STEP)));
        let f = |x: &[f32]| run(&net, &with(&f3d, x), &lifted);
        out.push(entry("deform3d_refine", "query", &shape, grad_check_f32_extrapolated(f, &f3d.data, &gf.data, CURVED_STEP)));
        for head in ["attention", "offset"] {
            let (w, gw) = match head {
                "attention" => (net.attn_head.weight.value.clone(), net.attn_head.weight.grad.clone()),
                _ => (net.offset_head.weight.value.clone(), net.offset_head.weight.grad.clone()),
            };
            let f = |x: &[f32]| {
                let mut n = net.clone();
                match head {
                    "attention" => n.attn_head.weight.value = with(&w, x),
                    _ => n.offset_head.weight.value = with(&w, x),
                }
                run(&n, &f3d, &lifted)
            };
            let wrt = if head == "attention" { "attention_weight" } else { "offset_weight" };
            // a weight moves every voxel at once; the larger step keeps the
            // rounding of that many outputs small against the difference
            out.push(entry("deform3d_refine", wrt, &shape, grad_check_f32_extrapolated(f, &w.data, &gw, 2.5 * CURVED_STEP)));
        }
    }
    Ok(())
}

fn labels(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    (0..n).map(|i| if i % 7 == 3 { 255 } else { rng.gen_range(0..k as u8) }).collect()
}

fn check_losses(rng: &mut ChaCha8Rng, out: &mut Vec<SuiteEntry>) -> Result<()> {
    for (k, n) in [(3usize, 10usize), (7, 16), (2, 9)] {
        let shape = [k, n];
        let logits = Tensor::uniform(&shape, 2.0, rng);
        let lab = labels(n, k, rng);
        let w: Vec<f32> = (0..k).map(|_| rng.gen_range(0.2..3.0)).collect();
        let (_, g) = weighted_ce_loss(&logits, &lab, &w)?;
        let f = |d: &[f32]| weighted_ce_loss(&with(&logits, d), &lab, &w).unwrap().0;
        out.push(entry("weighted_ce_loss", "logits", &shape, grad_check_f32(f, &logits.data, &g.data, 1e-3)));

        let probs = softmax_channels(&logits);
        for (mode, name) in [(AffinityMode::Geometry, "affinity_geometry"), (AffinityMode::Semantics, "affinity_semantics")] {
            let (_, g) = affinity_loss(&probs, &lab, mode)?;
            let f = |d: &[f32]| affinity_loss(&with(&probs, d), &lab, mode).unwrap().0;
            out.push(entry(name, "probs", &shape, grad_check_f32(f, &probs.data, &g.data, 1e-4)));
        }
    }
    for (w, h, nb) in [(3usize, 2usize, 4usize), (4, 4, 6), (2, 5, 3)] {
        let edges = DepthProbVolume::uniform_edges(0.5, 6.5, nb);
        let logits = rand_tensor(&[nb, h, w], rng);
        let dp = DepthProbVolume::from_logits(edges, &logits)?;
        let s = 2;
        let values = (0..w * h * s * s).map(|i| if i % 5 == 1 { f32::INFINITY } else { rng.gen_range(0.3..7.0) }).collect();
        let depth = DepthMap::new(w * s, h * s, values)?;
        let (_, g) = depth_loss(&dp, &depth)?;
        let f = |d: &[f32]| {
            let mut q = dp.clone();
            q.probs.data.copy_from_slice(d);
            depth_loss(&q, &depth).unwrap().0
        };
        out.push(entry("depth_loss", "probs", &[h, w, nb], grad_check_f32(f, &dp.probs.data, &g.data, 1e-4)));
    }
    Ok(())
}

/// Runs every check. Deterministic for a given `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    check_conv(&mut rng, &mut out)?;
    check_conv_layers(&mut rng, &mut out)?;
    check_norms(&mut rng, &mut out)?;
    check_activations(&mut rng, &mut out)?;
    check_roi_pool(&mut rng, &mut out)?;
    check_trilinear(&mut rng, &mut out)?;
    check_lift_scatter(&mut rng, &mut out)?;
    check_deform(&mut rng, &mut out)?;
    check_losses(&mut rng, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separated_values_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = separated(&[4, 5], 0.04, &mut rng);
        let mut v = t.data.clone();
        v.sort_by(f32::total_cmp);
        assert!(v.windows(2).all(|w| w[1] - w[0] >= 0.039));
        assert!(v.iter().all(|x| x.abs() >= 0.039));
    }

    #[test]
    fn every_check_passes() {
        let entries: Vec<_> = (0..6).flat_map(|s| gradient_suite(s).unwrap()).collect();
        let failed: Vec<String> = entries
            .iter()
            .filter(|e| !e.passed())
            .map(|e| format!("{} wrt {} {:?}: {:?}", e.op, e.wrt, e.shape, e.check))
            .collect();
        for e in &entries {
            eprintln!("{:<18} {:<16} {:?} {:.2e}", e.op, e.wrt, e.shape, e.check.max_rel_error);
        }
        assert!(failed.is_empty(), "{failed:#?}");
    }
}
