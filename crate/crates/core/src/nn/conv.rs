//! 3×3 convolution and transposed convolution over `[channels × H × W]`
//! tensors with same-padding (`out = ceil(in / stride)`, asymmetric padding
//! biased toward the end, as in common deep-learning frameworks).
//!
//! The inner loops are written as contiguous slice walks per kernel tap so
//! they vectorize; this is the hot path of autoencoder training.

use rand::Rng;

use super::tensor::Tensor;
use super::{Activation, NnError};

/// Output spatial size under same-padding.
pub fn conv_output_dim(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

/// Number of zero rows/columns padded before the first input row/column.
pub fn pad_begin(input: usize, stride: usize) -> usize {
    let out = conv_output_dim(input, stride);
    let total = ((out - 1) * stride + 3).saturating_sub(input);
    total / 2
}

fn dims3(t: &Tensor, context: &'static str) -> Result<(usize, usize, usize), NnError> {
    match t.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(NnError::ShapeMismatch {
            context,
            expected: vec![3],
            got: other.to_vec(),
        }),
    }
}

fn check_kernels(kernels: &Tensor, in_channels: usize, context: &'static str) -> Result<(usize, usize), NnError> {
    match kernels.shape() {
        [f, c, 3, 3] if *c == in_channels => Ok((*f, *c)),
        other => Err(NnError::ShapeMismatch {
            context,
            expected: vec![0, in_channels, 3, 3],
            got: other.to_vec(),
        }),
    }
}

fn check_stride(stride: usize) -> Result<(), NnError> {
    if stride == 1 || stride == 2 {
        Ok(())
    } else {
        Err(NnError::ShapeMismatch {
            context: "conv stride must be 1 or 2",
            expected: vec![1, 2],
            got: vec![stride],
        })
    }
}

/// Valid output-column range `[lo, hi]` for kernel tap `kx`, i.e. the columns
/// whose sampled input column `ox·stride + kx − pad` lands inside `[0, w)`.
fn tap_range(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> Option<(usize, usize)> {
    let lo = if pad > kx {
        (pad - kx).div_ceil(stride)
    } else {
        0
    };
    if kx > w - 1 + pad {
        return None;
    }
    let hi = ((w - 1 + pad - kx) / stride).min(ow - 1);
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// [`tap_range`] for all three horizontal taps, hoisted out of the row loops.
fn tap_ranges(pad: usize, stride: usize, w: usize, ow: usize) -> [Option<(usize, usize)>; 3] {
    [0, 1, 2].map(|kx| tap_range(kx, pad, stride, w, ow))
}

/// Output-column interval on which all three horizontal taps are in bounds,
/// so the row update can fuse them into one pass.
fn fused_range(ranges: &[Option<(usize, usize)>; 3]) -> Option<(usize, usize)> {
    let mut lo = 0;
    let mut hi = usize::MAX;
    for r in ranges {
        let (l, h) = (*r)?;
        lo = lo.max(l);
        hi = hi.min(h);
    }
    if lo > hi {
        None
    } else {
        Some((lo, hi))
    }
}

/// One tap's scalar contribution `out[o] += weight·in[o·stride + kx − pw]`
/// over output columns `lo..=hi` (the caller guarantees bounds).
fn scalar_tap(
    out_row: &mut [f64],
    in_row: &[f64],
    weight: f64,
    kx: usize,
    lo: usize,
    hi: usize,
    stride: usize,
    pw: usize,
) {
    for o in lo..=hi {
        out_row[o] += weight * in_row[o * stride + kx - pw];
    }
}

/// Accumulates one 3-tap kernel row into one output row:
/// `out[ox] += Σ_kx k3[kx]·in[ox·stride + kx − pw]` over each tap's valid
/// columns. The interval where all three taps are in bounds runs fused —
/// one store per element instead of three — which is the difference between
/// a store-bound and a compute-bound inner loop; the at-most-one boundary
/// column per tap and side runs alone.
fn row_taps(
    out_row: &mut [f64],
    in_row: &[f64],
    k3: &[f64],
    ranges: &[Option<(usize, usize)>; 3],
    stride: usize,
    pw: usize,
) {
    let Some((flo, fhi)) = fused_range(ranges) else {
        for kx in 0..3 {
            if let Some((lo, hi)) = ranges[kx] {
                scalar_tap(out_row, in_row, k3[kx], kx, lo, hi, stride, pw);
            }
        }
        return;
    };
    for kx in 0..3 {
        let (lo, hi) = ranges[kx].expect("fused interval implies all taps valid");
        if lo < flo {
            scalar_tap(out_row, in_row, k3[kx], kx, lo, flo - 1, stride, pw);
        }
        if hi > fhi {
            scalar_tap(out_row, in_row, k3[kx], kx, fhi + 1, hi, stride, pw);
        }
    }
    let (k0, k1, k2) = (k3[0], k3[1], k3[2]);
    let base = flo * stride - pw; // column sampled by tap 0 at flo
    if stride == 1 {
        let n = fhi - flo + 1;
        let i0 = &in_row[base..base + n];
        let i1 = &in_row[base + 1..base + 1 + n];
        let i2 = &in_row[base + 2..base + 2 + n];
        for (((o, a), b), c) in out_row[flo..=fhi].iter_mut().zip(i0).zip(i1).zip(i2) {
            *o += k0 * a + k1 * b + k2 * c;
        }
    } else {
        let mut ix = base;
        for o in out_row[flo..=fhi].iter_mut() {
            *o += k0 * in_row[ix] + k1 * in_row[ix + 1] + k2 * in_row[ix + 2];
            ix += 2;
        }
    }
}

/// Dot product accumulated in four independent lanes (fixed association
/// order, so results are identical on every call) to expose SIMD and hide
/// add latency in the reduction-heavy backward pass.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (xa, xb) in ca.by_ref().zip(cb.by_ref()) {
        for j in 0..4 {
            lanes[j] += xa[j] * xb[j];
        }
    }
    let mut acc = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for (xa, xb) in ca.remainder().iter().zip(cb.remainder()) {
        acc += xa * xb;
    }
    acc
}

/// Like [`dot`] but pairing `g[i]` with `x[2·i]` (stride-2 column sampling).
fn dot_step2(g: &[f64], x: &[f64]) -> f64 {
    debug_assert!(x.len() > 2 * (g.len().saturating_sub(1)));
    let mut lanes = [0.0; 4];
    let chunks = g.len() / 4;
    for i in 0..chunks {
        for j in 0..4 {
            lanes[j] += g[4 * i + j] * x[8 * i + 2 * j];
        }
    }
    let mut acc = (lanes[0] + lanes[2]) + (lanes[1] + lanes[3]);
    for i in 4 * chunks..g.len() {
        acc += g[i] * x[2 * i];
    }
    acc
}

/// Core cross-correlation (no bias, no activation): input `[c,h,w]`, kernels
/// `[f,c,3,3]` → output `[f, ceil(h/s), ceil(w/s)]`.
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor, NnError> {
    check_stride(stride)?;
    let (c_in, h, w) = dims3(input, "conv2d input")?;
    let (filters, _) = check_kernels(kernels, c_in, "conv2d kernels")?;
    let (oh, ow) = (conv_output_dim(h, stride), conv_output_dim(w, stride));
    let (ph, pw) = (pad_begin(h, stride), pad_begin(w, stride));

    let mut out = Tensor::zeros(&[filters, oh, ow]);
    let in_data = input.data();
    let k_data = kernels.data();
    let out_data = out.data_mut();
    let ranges = tap_ranges(pw, stride, w, ow);
    for f in 0..filters {
        let out_f = &mut out_data[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..c_in {
            let in_c = &in_data[c * h * w..(c + 1) * h * w];
            let k9 = &k_data[(f * c_in + c) * 9..(f * c_in + c) * 9 + 9];
            for oy in 0..oh {
                let out_row = &mut out_f[oy * ow..(oy + 1) * ow];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &in_c[iy as usize * w..(iy as usize + 1) * w];
                    row_taps(out_row, in_row, &k9[ky * 3..ky * 3 + 3], &ranges, stride, pw);
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`conv2d`] with respect to its input (also the forward map of
/// a stride-`s` transposed convolution). `in_h`/`in_w` are the dimensions of
/// the tensor the gradient is taken for.
pub fn conv2d_backward_input(
    grad_out: &Tensor,
    kernels: &Tensor,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor, NnError> {
    check_stride(stride)?;
    let (filters, oh, ow) = dims3(grad_out, "conv2d_backward_input grad")?;
    let c_in = match kernels.shape() {
        [f, c, 3, 3] if *f == filters => *c,
        other => {
            return Err(NnError::ShapeMismatch {
                context: "conv2d_backward_input kernels",
                expected: vec![filters, 0, 3, 3],
                got: other.to_vec(),
            })
        }
    };
    let expected = (conv_output_dim(in_h, stride), conv_output_dim(in_w, stride));
    if (oh, ow) != expected {
        return Err(NnError::ShapeMismatch {
            context: "conv2d_backward_input spatial dims",
            expected: vec![expected.0, expected.1],
            got: vec![oh, ow],
        });
    }
    let (ph, pw) = (pad_begin(in_h, stride), pad_begin(in_w, stride));

    let mut grad_in = Tensor::zeros(&[c_in, in_h, in_w]);
    let g_data = grad_out.data();
    let k_data = kernels.data();
    let gi_data = grad_in.data_mut();
    let ranges = tap_ranges(pw, stride, in_w, ow);
    // For stride 1 the scatter can be re-indexed by destination column —
    // `grad_in[i] += Σ k[2−kx']·g[i + kx' − (2−pw)]` — which is itself a
    // 3-tap row update and reuses the fused kernel of the forward pass.
    let adj_ranges = tap_ranges(2 - pw, 1, ow, in_w);
    for c in 0..c_in {
        let gi_c = &mut gi_data[c * in_h * in_w..(c + 1) * in_h * in_w];
        for f in 0..filters {
            let g_f = &g_data[f * oh * ow..(f + 1) * oh * ow];
            let k9 = &k_data[(f * c_in + c) * 9..(f * c_in + c) * 9 + 9];
            for oy in 0..oh {
                let g_row = &g_f[oy * ow..(oy + 1) * ow];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= in_h as isize {
                        continue;
                    }
                    let gi_row = &mut gi_c[iy as usize * in_w..(iy as usize + 1) * in_w];
                    if stride == 1 {
                        let k_rev = [k9[ky * 3 + 2], k9[ky * 3 + 1], k9[ky * 3]];
                        row_taps(gi_row, g_row, &k_rev, &adj_ranges, 1, 2 - pw);
                    } else {
                        for kx in 0..3 {
                            let weight = k9[ky * 3 + kx];
                            let Some((lo, hi)) = ranges[kx] else {
                                continue;
                            };
                            let mut ix = lo * stride + kx - pw;
                            for g in &g_row[lo..=hi] {
                                gi_row[ix] += weight * g;
                                ix += 2;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Gradient of [`conv2d`] with respect to its kernels.
pub fn conv2d_backward_kernels(
    input: &Tensor,
    grad_out: &Tensor,
    stride: usize,
) -> Result<Tensor, NnError> {
    check_stride(stride)?;
    let (c_in, h, w) = dims3(input, "conv2d_backward_kernels input")?;
    let (filters, oh, ow) = dims3(grad_out, "conv2d_backward_kernels grad")?;
    let expected = (conv_output_dim(h, stride), conv_output_dim(w, stride));
    if (oh, ow) != expected {
        return Err(NnError::ShapeMismatch {
            context: "conv2d_backward_kernels spatial dims",
            expected: vec![expected.0, expected.1],
            got: vec![oh, ow],
        });
    }
    let (ph, pw) = (pad_begin(h, stride), pad_begin(w, stride));

    let mut grad_k = Tensor::zeros(&[filters, c_in, 3, 3]);
    let in_data = input.data();
    let g_data = grad_out.data();
    let gk_data = grad_k.data_mut();
    let ranges = tap_ranges(pw, stride, w, ow);
    for f in 0..filters {
        let g_f = &g_data[f * oh * ow..(f + 1) * oh * ow];
        for c in 0..c_in {
            let in_c = &in_data[c * h * w..(c + 1) * h * w];
            let k9 = &mut gk_data[(f * c_in + c) * 9..(f * c_in + c) * 9 + 9];
            for oy in 0..oh {
                let g_row = &g_f[oy * ow..(oy + 1) * ow];
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let in_row = &in_c[iy as usize * w..(iy as usize + 1) * w];
                    for kx in 0..3 {
                        let Some((lo, hi)) = ranges[kx] else {
                            continue;
                        };
                        let base = lo * stride + kx - pw;
                        let g_seg = &g_row[lo..=hi];
                        let acc = if stride == 1 {
                            dot(g_seg, &in_row[base..base + hi - lo + 1])
                        } else {
                            dot_step2(g_seg, &in_row[base..])
                        };
                        k9[ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
    Ok(grad_k)
}

/// Gradients of one convolution (or transposed convolution) layer.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// 3×3 same-padding convolution layer: `activation(conv(x) + b)`.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    /// `[filters × in_channels × 3 × 3]`
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub activation: Activation,
}

impl Conv2dLayer {
    pub fn new(
        in_channels: usize,
        filters: usize,
        stride: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (in_channels * 9) as f64).sqrt();
        let mut kernels = Tensor::zeros(&[filters, in_channels, 3, 3]);
        for v in kernels.data_mut() {
            *v = rng.random_range(-limit..limit);
        }
        Conv2dLayer {
            kernels,
            bias: Tensor::zeros(&[filters]),
            stride,
            activation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn filters(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    /// Returns (post-activation, pre-activation).
    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, Tensor), NnError> {
        let mut pre = conv2d(input, &self.kernels, self.stride)?;
        add_channel_bias(&mut pre, &self.bias);
        let post = apply_activation(&pre, self.activation);
        Ok((post, pre))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.forward_cached(input).map(|(post, _)| post)
    }

    /// Backward through activation, bias and convolution; `input` and `pre`
    /// must come from the matching `forward_cached` call.
    pub fn backward(
        &self,
        input: &Tensor,
        pre: &Tensor,
        grad_post: &Tensor,
    ) -> Result<(ConvGrads, Tensor), NnError> {
        let delta = activation_delta(pre, grad_post, self.activation)?;
        let grad_kernels = conv2d_backward_kernels(input, &delta, self.stride)?;
        let grad_bias = channel_sums(&delta);
        let (_, h, w) = dims3(input, "Conv2dLayer::backward input")?;
        let grad_in = conv2d_backward_input(&delta, &self.kernels, self.stride, h, w)?;
        Ok((
            ConvGrads {
                kernels: grad_kernels,
                bias: grad_bias,
            },
            grad_in,
        ))
    }
}

/// Transposed 3×3 convolution layer upsampling by its stride:
/// `[in_channels × h × w] → [out_channels × h·s × w·s]`.
///
/// Kernels are stored in the orientation of the underlying downsampling
/// convolution (`[in_channels × out_channels × 3 × 3]`), so the forward map
/// here is exactly `conv2d_backward_input` and vice versa.
#[derive(Debug, Clone)]
pub struct ConvTranspose2dLayer {
    /// `[in_channels × out_channels × 3 × 3]`
    pub kernels: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub activation: Activation,
}

impl ConvTranspose2dLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (in_channels * 9) as f64).sqrt();
        let mut kernels = Tensor::zeros(&[in_channels, out_channels, 3, 3]);
        for v in kernels.data_mut() {
            *v = rng.random_range(-limit..limit);
        }
        ConvTranspose2dLayer {
            kernels,
            bias: Tensor::zeros(&[out_channels]),
            stride,
            activation,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }

    pub fn forward_cached(&self, input: &Tensor) -> Result<(Tensor, Tensor), NnError> {
        let (c, h, w) = dims3(input, "ConvTranspose2dLayer input")?;
        if c != self.in_channels() {
            return Err(NnError::ShapeMismatch {
                context: "ConvTranspose2dLayer input channels",
                expected: vec![self.in_channels()],
                got: vec![c],
            });
        }
        let mut pre = conv2d_backward_input(
            input,
            &self.kernels,
            self.stride,
            h * self.stride,
            w * self.stride,
        )?;
        add_channel_bias(&mut pre, &self.bias);
        let post = apply_activation(&pre, self.activation);
        Ok((post, pre))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor, NnError> {
        self.forward_cached(input).map(|(post, _)| post)
    }

    pub fn backward(
        &self,
        input: &Tensor,
        pre: &Tensor,
        grad_post: &Tensor,
    ) -> Result<(ConvGrads, Tensor), NnError> {
        let delta = activation_delta(pre, grad_post, self.activation)?;
        // Kernel gradient swaps the roles of image and output gradient: the
        // underlying convolution maps the (large) output plane back to the
        // (small) input plane.
        let grad_kernels = conv2d_backward_kernels(&delta, input, self.stride)?;
        let grad_bias = channel_sums(&delta);
        let grad_in = conv2d(&delta, &self.kernels, self.stride)?;
        Ok((
            ConvGrads {
                kernels: grad_kernels,
                bias: grad_bias,
            },
            grad_in,
        ))
    }
}

fn add_channel_bias(t: &mut Tensor, bias: &Tensor) {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("bias add on non-3d tensor"),
    };
    debug_assert_eq!(bias.len(), c);
    for (chan, b) in t.data_mut().chunks_exact_mut(h * w).zip(bias.data()) {
        for v in chan {
            *v += b;
        }
    }
}

fn apply_activation(pre: &Tensor, act: Activation) -> Tensor {
    let data = pre.data().iter().map(|&v| act.apply(v)).collect();
    Tensor::from_vec(pre.shape(), data).unwrap()
}

fn activation_delta(pre: &Tensor, grad_post: &Tensor, act: Activation) -> Result<Tensor, NnError> {
    if pre.shape() != grad_post.shape() {
        return Err(NnError::ShapeMismatch {
            context: "activation delta",
            expected: pre.shape().to_vec(),
            got: grad_post.shape().to_vec(),
        });
    }
    let data = pre
        .data()
        .iter()
        .zip(grad_post.data())
        .map(|(&p, &g)| g * act.derivative(p))
        .collect();
    Ok(Tensor::from_vec(pre.shape(), data).unwrap())
}

/// Per-channel sums of a `[c,h,w]` tensor (bias gradient).
fn channel_sums(t: &Tensor) -> Tensor {
    let (c, h, w) = match t.shape() {
        [c, h, w] => (*c, *h, *w),
        _ => unreachable!("channel sums on non-3d tensor"),
    };
    let sums = t
        .data()
        .chunks_exact(h * w)
        .map(|chan| chan.iter().sum())
        .collect();
    Tensor::from_vec(&[c], sums).unwrap()
}
