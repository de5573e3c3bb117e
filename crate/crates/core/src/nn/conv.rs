//! 3D cross-correlation and its transpose over `[C, D, H, W]` tensors.
//!
//! Weights are `[Cout, Cin, kd, kh, kw]`. A 2D convolution is the `D = 1`,
//! `kd = 1` special case.

use rand::Rng;
use rayon::prelude::*;

use super::{Module, Parameter};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Range of output positions `o` with `0 <= o*stride + tap - pad < n_in`.
#[inline]
fn valid_range(n_in: usize, n_out: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    if n_in + pad < tap + 1 {
        return (0, 0);
    }
    let hi = ((n_in - 1 + pad - tap) / stride + 1).min(n_out);
    (lo.min(hi), hi)
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape[..] {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => contract(format!("{what} must be rank 4 [C, D, H, W], got {:?}", t.shape)),
    }
}

fn dims5(t: &Tensor) -> Result<[usize; 5]> {
    match t.shape[..] {
        [a, b, c, d, e] => Ok([a, b, c, d, e]),
        _ => contract(format!("weight must be rank 5, got {:?}", t.shape)),
    }
}

/// Output spatial extents of a convolution.
pub fn conv_output_dims(input: [usize; 3], kernel: [usize; 3], stride: [usize; 3], padding: [usize; 3]) -> Result<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if stride[a] == 0 {
            return contract("stride must be >= 1");
        }
        let padded = input[a] + 2 * padding[a];
        if padded < kernel[a] {
            return contract(format!(
                "kernel {:?} does not fit input {:?} with padding {:?}",
                kernel, input, padding
            ));
        }
        out[a] = (padded - kernel[a]) / stride[a] + 1;
    }
    Ok(out)
}

/// Row-level iteration shared by the three convolution kernels: calls
/// `f(out_row_offset, in_row_offset, (lo, hi), in_shift)` for every output
/// row that overlaps the input at kernel tap `(a, b, c)`.
#[inline]
#[allow(clippy::too_many_arguments)]
fn for_rows(
    ins: [usize; 3],
    outs: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
    tap: [usize; 3],
    mut f: impl FnMut(usize, usize, (usize, usize), isize),
) {
    let (z_lo, z_hi) = valid_range(ins[0], outs[0], stride[0], tap[0], padding[0]);
    let (y_lo, y_hi) = valid_range(ins[1], outs[1], stride[1], tap[1], padding[1]);
    let xr = valid_range(ins[2], outs[2], stride[2], tap[2], padding[2]);
    if xr.0 >= xr.1 {
        return;
    }
    let shift = tap[2] as isize - padding[2] as isize;
    for z in z_lo..z_hi {
        let iz = z * stride[0] + tap[0] - padding[0];
        for y in y_lo..y_hi {
            let iy = y * stride[1] + tap[1] - padding[1];
            f((z * outs[1] + y) * outs[2], (iz * ins[1] + iy) * ins[2], xr, shift);
        }
    }
}

/// Standard cross-correlation with optional per-output-channel bias.
pub fn conv3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor> {
    let [cin, d, h, w] = dims4(input, "input")?;
    let [cout, wcin, kd, kh, kw] = dims5(weight)?;
    if wcin != cin {
        return contract(format!("weight expects {wcin} input channels, input has {cin}"));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return contract("bias length must equal output channels");
        }
    }
    let ins = [d, h, w];
    let outs = conv_output_dims(ins, [kd, kh, kw], stride, padding)?;
    let in_len = d * h * w;
    let out_len = outs.iter().product::<usize>();
    let sx = stride[2];
    let mut out = Tensor::zeros(&[cout, outs[0], outs[1], outs[2]]);
    out.data.par_chunks_mut(out_len).enumerate().for_each(|(co, out_c)| {
        if let Some(b) = bias {
            out_c.fill(b[co]);
        }
        for ci in 0..cin {
            let in_c = &input.data[ci * in_len..(ci + 1) * in_len];
            let wbase = (co * cin + ci) * kd * kh * kw;
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let wv = weight.data[wbase + (a * kh + b) * kw + c];
                        for_rows(ins, outs, stride, padding, [a, b, c], |orow, irow, (lo, hi), shift| {
                            let o = &mut out_c[orow + lo..orow + hi];
                            if sx == 1 {
                                let start = (irow as isize + lo as isize + shift) as usize;
                                for (ov, iv) in o.iter_mut().zip(&in_c[start..start + (hi - lo)]) {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (k, ov) in o.iter_mut().enumerate() {
                                    let ix = ((lo + k) * sx) as isize + shift;
                                    *ov += wv * in_c[irow + ix as usize];
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradient of [`conv3d`] with respect to its input.
pub fn conv3d_backward_input(
    grad_out: &Tensor,
    weight: &Tensor,
    input_dims: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<Tensor> {
    let [cout, gd, gh, gw] = dims4(grad_out, "grad_out")?;
    let [wcout, cin, kd, kh, kw] = dims5(weight)?;
    if wcout != cout {
        return contract("grad_out channels do not match weight");
    }
    let outs = [gd, gh, gw];
    if conv_output_dims(input_dims, [kd, kh, kw], stride, padding)? != outs {
        return contract("grad_out extents inconsistent with input extents");
    }
    let in_len = input_dims.iter().product::<usize>();
    let out_len = gd * gh * gw;
    let sx = stride[2];
    let mut gin = Tensor::zeros(&[cin, input_dims[0], input_dims[1], input_dims[2]]);
    gin.data.par_chunks_mut(in_len).enumerate().for_each(|(ci, gin_c)| {
        for co in 0..cout {
            let go_c = &grad_out.data[co * out_len..(co + 1) * out_len];
            let wbase = (co * cin + ci) * kd * kh * kw;
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let wv = weight.data[wbase + (a * kh + b) * kw + c];
                        for_rows(input_dims, outs, stride, padding, [a, b, c], |orow, irow, (lo, hi), shift| {
                            let g = &go_c[orow + lo..orow + hi];
                            if sx == 1 {
                                let start = (irow as isize + lo as isize + shift) as usize;
                                for (iv, gv) in gin_c[start..start + (hi - lo)].iter_mut().zip(g) {
                                    *iv += wv * gv;
                                }
                            } else {
                                for (k, gv) in g.iter().enumerate() {
                                    let ix = ((lo + k) * sx) as isize + shift;
                                    gin_c[irow + ix as usize] += wv * gv;
                                }
                            }
                        });
                    }
                }
            }
        }
    });
    Ok(gin)
}

/// Gradient of [`conv3d`] with respect to weight and bias.
pub fn conv3d_backward_weight(
    input: &Tensor,
    grad_out: &Tensor,
    kernel: [usize; 3],
    stride: [usize; 3],
    padding: [usize; 3],
) -> Result<(Tensor, Vec<f32>)> {
    let [cin, d, h, w] = dims4(input, "input")?;
    let [cout, gd, gh, gw] = dims4(grad_out, "grad_out")?;
    let ins = [d, h, w];
    let outs = [gd, gh, gw];
    if conv_output_dims(ins, kernel, stride, padding)? != outs {
        return contract("grad_out extents inconsistent with input extents");
    }
    let [kd, kh, kw] = kernel;
    let taps = kd * kh * kw;
    let in_len = d * h * w;
    let out_len = gd * gh * gw;
    let sx = stride[2];
    let mut gw_t = Tensor::zeros(&[cout, cin, kd, kh, kw]);
    gw_t.data.par_chunks_mut(cin * taps).enumerate().for_each(|(co, gw_c)| {
        let go_c = &grad_out.data[co * out_len..(co + 1) * out_len];
        for ci in 0..cin {
            let in_c = &input.data[ci * in_len..(ci + 1) * in_len];
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let mut acc = 0.0f64;
                        for_rows(ins, outs, stride, padding, [a, b, c], |orow, irow, (lo, hi), shift| {
                            let g = &go_c[orow + lo..orow + hi];
                            let mut row = 0.0f32;
                            if sx == 1 {
                                let start = (irow as isize + lo as isize + shift) as usize;
                                for (gv, iv) in g.iter().zip(&in_c[start..start + (hi - lo)]) {
                                    row += gv * iv;
                                }
                            } else {
                                for (k, gv) in g.iter().enumerate() {
                                    let ix = ((lo + k) * sx) as isize + shift;
                                    row += gv * in_c[irow + ix as usize];
                                }
                            }
                            acc += row as f64;
                        });
                        gw_c[ci * taps + (a * kh + b) * kw + c] = acc as f32;
                    }
                }
            }
        }
    });
    let gb = (0..cout)
        .map(|co| grad_out.data[co * out_len..(co + 1) * out_len].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    Ok((gw_t, gb))
}

/// Transposed convolution: the adjoint of [`conv3d`] with the same geometry.
/// `weight` is `[Cin, Cout, kd, kh, kw]`.
pub fn conv_transpose3d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f32]>,
    stride: [usize; 3],
    padding: [usize; 3],
    output_dims: [usize; 3],
) -> Result<Tensor> {
    let mut out = conv3d_backward_input(input, weight, output_dims, stride, padding)?;
    if let Some(b) = bias {
        let n = out.inner_len();
        if b.len() != out.shape[0] {
            return contract("bias length must equal output channels");
        }
        for (c, &bv) in b.iter().enumerate() {
            for v in &mut out.data[c * n..(c + 1) * n] {
                *v += bv;
            }
        }
    }
    Ok(out)
}

fn kaiming_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

/// Convolution layer.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    input: Option<Tensor>,
}

impl Conv3d {
    pub fn new(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel.iter().product::<usize>();
        let weight = Tensor::uniform(&[cout, cin, kernel[0], kernel[1], kernel[2]], kaiming_bound(fan_in), rng);
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            padding,
            input: None,
        }
    }

    /// Cubic kernel `k` with unit stride and "same" padding.
    pub fn same(name: &str, cin: usize, cout: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self::new(name, cin, cout, [k; 3], [1; 3], [k / 2; 3], rng)
    }

    /// Planar `k x k` kernel for `[C, 1, H, W]` images.
    pub fn planar(name: &str, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self::new(name, cin, cout, [1, k, k], [1, stride, stride], [0, k / 2, k / 2], rng)
    }

    pub fn scale_weights(&mut self, s: f32) {
        self.weight.value.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn zero_weights(&mut self) {
        self.weight.value.data.fill(0.0);
        self.bias.value.data.fill(0.0);
    }

    pub fn kernel(&self) -> [usize; 3] {
        let s = &self.weight.value.shape;
        [s[2], s[3], s[4]]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape[0]
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = conv3d(x, &self.weight.value, Some(&self.bias.value.data), self.stride, self.padding)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    /// Forward without caching, for inference.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv3d(x, &self.weight.value, Some(&self.bias.value.data), self.stride, self.padding)
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(&mut self, grad_out: &Tensor, want_input_grad: bool) -> Result<Option<Tensor>> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| crate::Error::Contract("backward called before forward".into()))?;
        let (gw, gb) = conv3d_backward_weight(input, grad_out, self.kernel(), self.stride, self.padding)?;
        for (g, v) in self.weight.grad.iter_mut().zip(&gw.data) {
            *g += v;
        }
        for (g, v) in self.bias.grad.iter_mut().zip(&gb) {
            *g += v;
        }
        if !want_input_grad {
            return Ok(None);
        }
        let dims = [input.shape[1], input.shape[2], input.shape[3]];
        conv3d_backward_input(grad_out, &self.weight.value, dims, self.stride, self.padding).map(Some)
    }
}

impl Module for Conv3d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Transposed convolution layer (learned upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub stride: [usize; 3],
    input: Option<Tensor>,
}

impl ConvTranspose3d {
    /// Kernel equal to stride: every input voxel expands into a disjoint block.
    pub fn new(name: &str, cin: usize, cout: usize, stride: [usize; 3], rng: &mut impl Rng) -> Self {
        let weight = Tensor::uniform(&[cin, cout, stride[0], stride[1], stride[2]], kaiming_bound(cin), rng);
        Self {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[cout])),
            stride,
            input: None,
        }
    }

    fn out_dims(&self, x: &Tensor) -> [usize; 3] {
        [x.shape[1] * self.stride[0], x.shape[2] * self.stride[1], x.shape[3] * self.stride[2]]
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose3d(x, &self.weight.value, Some(&self.bias.value.data), self.stride, [0; 3], self.out_dims(x))
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.apply(x)?;
        self.input = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad_out: &Tensor) -> Result<Tensor> {
        let input = self
            .input
            .as_ref()
            .ok_or_else(|| crate::Error::Contract("backward called before forward".into()))?;
        // adjoint of the adjoint: roles of input and output swap
        let (gw, _) = conv3d_backward_weight(grad_out, input, self.stride, self.stride, [0; 3])?;
        for (g, v) in self.weight.grad.iter_mut().zip(&gw.data) {
            *g += v;
        }
        let n = grad_out.inner_len();
        for (c, g) in self.bias.grad.iter_mut().enumerate() {
            *g += grad_out.data[c * n..(c + 1) * n].iter().sum::<f32>();
        }
        conv3d(grad_out, &self.weight.value, None, self.stride, [0; 3])
    }
}

impl Module for ConvTranspose3d {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Six nested loops, no tricks.
    fn naive(input: &Tensor, weight: &Tensor, bias: &[f32], s: [usize; 3], p: [usize; 3]) -> Tensor {
        let [cin, d, h, w] = [input.shape[0], input.shape[1], input.shape[2], input.shape[3]];
        let [cout, _, kd, kh, kw] = [weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3], weight.shape[4]];
        let od = (d + 2 * p[0] - kd) / s[0] + 1;
        let oh = (h + 2 * p[1] - kh) / s[1] + 1;
        let ow = (w + 2 * p[2] - kw) / s[2] + 1;
        let mut out = Tensor::zeros(&[cout, od, oh, ow]);
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = bias[co] as f64;
                        for ci in 0..cin {
                            for a in 0..kd {
                                for b in 0..kh {
                                    for c in 0..kw {
                                        let iz = (z * s[0] + a) as isize - p[0] as isize;
                                        let iy = (y * s[1] + b) as isize - p[1] as isize;
                                        let ix = (x * s[2] + c) as isize - p[2] as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        let iv = input.data[((ci * d + iz as usize) * h + iy as usize) * w + ix as usize];
                                        let wv = weight.data[(((co * cin + ci) * kd + a) * kh + b) * kw + c];
                                        acc += (iv * wv) as f64;
                                    }
                                }
                            }
                        }
                        out.data[((co * od + z) * oh + y) * ow + x] = acc as f32;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::uniform(&[2, 3, 4, 5], 1.0, &mut rng);
        let mut w = Tensor::zeros(&[2, 2, 1, 1, 1]);
        w.data[0] = 1.0;
        w.data[3] = 1.0;
        let y = conv3d(&x, &w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn box_sum_on_constant() {
        let x = Tensor::full(&[1, 5, 5, 5], 1.5);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&x, &w, None, [1; 3], [0; 3]).unwrap();
        assert_eq!(y.shape, vec![1, 3, 3, 3]);
        assert!(y.data.iter().all(|&v| (v - 27.0 * 1.5).abs() < 1e-5));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (s, p, k) in [([1; 3], [1; 3], [3; 3]), ([2; 3], [0; 3], [2; 3]), ([1, 2, 2], [0, 1, 1], [1, 3, 3]), ([2; 3], [1; 3], [3; 3])] {
            let x = Tensor::uniform(&[2, 4, 4, 4], 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 2, k[0], k[1], k[2]], 1.0, &mut rng);
            let b = [0.1, -0.2, 0.3];
            let got = conv3d(&x, &w, Some(&b), s, p).unwrap();
            let want = naive(&x, &w, &b, s, p);
            assert_eq!(got.shape, want.shape);
            for (g, w) in got.data.iter().zip(&want.data) {
                assert!((g - w).abs() < 1e-5, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, conv_backward_input(g)> and == <w, backward_weight(x, g)>
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (s, p) in [([1; 3], [1; 3]), ([2; 3], [1; 3])] {
            let x = Tensor::uniform(&[2, 5, 4, 6], 1.0, &mut rng);
            let w = Tensor::uniform(&[3, 2, 3, 3, 3], 1.0, &mut rng);
            let y = conv3d(&x, &w, None, s, p).unwrap();
            let g = Tensor::uniform(&y.shape, 1.0, &mut rng);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| (a * b) as f64).sum();
            let gx = conv3d_backward_input(&g, &w, [5, 4, 6], s, p).unwrap();
            let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| (a * b) as f64).sum();
            let (gw, _) = conv3d_backward_weight(&x, &g, [3; 3], s, p).unwrap();
            let rhs2: f64 = w.data.iter().zip(&gw.data).map(|(a, b)| (a * b) as f64).sum();
            assert!((lhs - rhs).abs() < 1e-3 * lhs.abs().max(1.0));
            assert!((lhs - rhs2).abs() < 1e-3 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let x = Tensor::zeros(&[2, 4, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 1, 1, 1]);
        assert!(conv3d(&x, &w, None, [1; 3], [0; 3]).is_err());
        let big = Tensor::zeros(&[1, 2, 5, 5, 5]);
        assert!(conv3d(&x, &big, None, [1; 3], [0; 3]).is_err());
    }

    #[test]
    fn transpose_doubles_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut up = ConvTranspose3d::new("up", 3, 2, [2; 3], &mut rng);
        let x = Tensor::uniform(&[3, 2, 3, 4], 1.0, &mut rng);
        let y = up.forward(&x).unwrap();
        assert_eq!(y.shape, vec![2, 4, 6, 8]);
        // each output voxel only sees its parent input voxel
        let v: f32 = (0..3).map(|ci| x.data[ci * 24] * up.weight.value.data[ci * 16]).sum();
        assert!((y.data[0] - v).abs() < 1e-6);
        let gx = up.backward(&Tensor::full(&y.shape, 1.0)).unwrap();
        assert_eq!(gx.shape, x.shape);
    }
}
