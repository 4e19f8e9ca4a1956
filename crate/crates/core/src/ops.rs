//! Numeric kernels: forward passes are public, vector-Jacobian products are
//! crate-private and driven by [`crate::autodiff::Tape`].
//!
//! Convolution is cross-correlation (no kernel flip). Convolution and dense
//! sums accumulate in `f64` and round once on output.

use crate::tensor::{Padding, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Self> {
        let (h, w, cin) = input.hwc("conv2d")?;
        let (kh, kw, kcin, cout) = match kernel.shape()[..] {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "conv2d",
                    reason: format!("kernel must be [kh, kw, Cin, Cout], got {:?}", kernel.shape()),
                })
            }
        };
        if kcin != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                left: input.shape().to_vec(),
                right: kernel.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: "stride must be at least 1".into(),
            });
        }
        let too_large = || TensorError::ShapeMismatch {
            op: "conv2d",
            left: input.shape().to_vec(),
            right: kernel.shape().to_vec(),
        };
        let (oh, pad_top) = padding.geometry(h, kh, stride).ok_or_else(too_large)?;
        let (ow, pad_left) = padding.geometry(w, kw, stride).ok_or_else(too_large)?;
        Ok(Self {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            oh,
            ow,
            stride,
            pad_top,
            pad_left,
        })
    }

    #[inline(always)]
    fn source(&self, out: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
        (out * self.stride + k).checked_sub(pad).filter(|&i| i < extent)
    }
}

/// `sum(a[i] * b[i])` with independent lanes so the loop vectorizes.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0f64; LANES];
    let split = a.len() - a.len() % LANES;
    for (x, y) in a[..split].chunks_exact(LANES).zip(b[..split].chunks_exact(LANES)) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total: f64 = acc.iter().sum();
    for (x, y) in a[split..].iter().zip(&b[split..]) {
        total += x * y;
    }
    total
}

#[inline(always)]
fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

impl ConvGeometry {
    #[inline(always)]
    fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Kernel widened to `f64` as `[Cout][kh * kw * Cin]`, matching the patch layout.
    #[inline(always)]
    fn transpose_kernel(&self, k: &[f32]) -> Vec<f64> {
        let p = self.patch_len();
        let mut kt = vec![0f64; p * self.cout];
        for i in 0..p {
            for co in 0..self.cout {
                kt[co * p + i] = f64::from(k[i * self.cout + co]);
            }
        }
        kt
    }

    /// Gathers the receptive patch of output `(oy, ox)`; out-of-bounds taps are zero.
    /// Returns false when the whole patch is zero.
    #[inline(always)]
    fn gather(&self, x: &[f32], oy: usize, ox: usize, patch: &mut [f64]) -> bool {
        let mut any = false;
        let c = self.cin;
        for ky in 0..self.kh {
            let iy = self.source(oy, ky, self.pad_top, self.h);
            for kx in 0..self.kw {
                let dst = &mut patch[(ky * self.kw + kx) * c..(ky * self.kw + kx + 1) * c];
                match (iy, self.source(ox, kx, self.pad_left, self.w)) {
                    (Some(iy), Some(ix)) => {
                        let src = &x[(iy * self.w + ix) * c..(iy * self.w + ix + 1) * c];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = f64::from(v);
                            any |= v != 0.0;
                        }
                    }
                    _ => dst.fill(0.0),
                }
            }
        }
        any
    }

    /// Adds a patch-shaped gradient back onto the input positions it came from.
    #[inline(always)]
    fn scatter(&self, dpatch: &[f64], oy: usize, ox: usize, gx: &mut [f64]) {
        for ky in 0..self.kh {
            let Some(iy) = self.source(oy, ky, self.pad_top, self.h) else { continue };
            for kx in 0..self.kw {
                let Some(ix) = self.source(ox, kx, self.pad_left, self.w) else { continue };
                let dst = &mut gx[(iy * self.w + ix) * self.cin..(iy * self.w + ix + 1) * self.cin];
                let src = &dpatch[(ky * self.kw + kx) * self.cin..(ky * self.kw + kx + 1) * self.cin];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }
}

/// Output-channel count from which the forward pass accumulates all channels
/// per tap instead of one dot product per channel.
const WIDE_COUT: usize = 8;

/// Calls `$name` through an AVX2-compiled copy when the CPU supports it.
/// Both copies execute the same IEEE operations in the same order (no FMA
/// contraction), so results are bitwise identical.
macro_rules! dispatch_avx2 {
    ($name:ident($($arg:expr),*)) => {{
        #[cfg(target_arch = "x86_64")]
        {
            if std::arch::is_x86_feature_detected!("avx2") {
                #[target_feature(enable = "avx2")]
                unsafe fn wide<R>(f: impl FnOnce() -> R) -> R {
                    f()
                }
                // SAFETY: the feature was detected at runtime.
                return unsafe { wide(|| $name($($arg),*)) };
            }
        }
        $name($($arg),*)
    }};
}

/// 2-D cross-correlation of `[H, W, Cin]` with `[kh, kw, Cin, Cout]`.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: Padding) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    dispatch_avx2!(conv2d_kernel(&g, input, kernel))
}

#[inline(always)]
fn conv2d_kernel(g: &ConvGeometry, input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let x = input.data();
    let p = g.patch_len();
    let wide_out = g.cout >= WIDE_COUT;
    let k: Vec<f64> = if wide_out {
        kernel.data().iter().map(|&v| f64::from(v)).collect()
    } else {
        g.transpose_kernel(kernel.data())
    };
    let mut acc = vec![0f64; g.cout];
    let mut patch = vec![0f64; p];
    let mut out = vec![0f32; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            if !g.gather(x, oy, ox, &mut patch) {
                continue;
            }
            let dst = &mut out[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            if wide_out {
                acc.fill(0.0);
                for (i, &v) in patch.iter().enumerate() {
                    if v != 0.0 {
                        axpy(&mut acc, v, &k[i * g.cout..(i + 1) * g.cout]);
                    }
                }
                for (d, &a) in dst.iter_mut().zip(&acc) {
                    *d = a as f32;
                }
            } else {
                for (co, d) in dst.iter_mut().enumerate() {
                    *d = dot(&patch, &k[co * p..(co + 1) * p]) as f32;
                }
            }
        }
    }
    Tensor::from_parts(vec![g.oh, g.ow, g.cout], out, "conv2d")
}

/// Input and kernel gradients; each is present only when requested.
pub(crate) type ConvGrads = (Option<Vec<f32>>, Option<Vec<f32>>);

/// Gradients of conv2d with respect to input and kernel.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: Padding,
    grad_out: &[f32],
    need_input: bool,
    need_kernel: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, kernel, stride, padding)?;
    dispatch_avx2!(conv2d_backward_kernel(&g, input, kernel, grad_out, need_input, need_kernel))
}

#[inline(always)]
fn conv2d_backward_kernel(
    g: &ConvGeometry,
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f32],
    need_input: bool,
    need_kernel: bool,
) -> Result<ConvGrads> {
    let x = input.data();
    let p = g.patch_len();
    let kt = if need_input { g.transpose_kernel(kernel.data()) } else { Vec::new() };
    let mut gx = need_input.then(|| vec![0f64; x.len()]);
    // Kernel gradient in the transposed [Cout][patch] layout.
    let mut gkt = need_kernel.then(|| vec![0f64; p * g.cout]);
    let mut patch = vec![0f64; p];
    let mut dpatch = vec![0f64; p];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let go = &grad_out[(oy * g.ow + ox) * g.cout..(oy * g.ow + ox + 1) * g.cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            if let Some(gx) = gx.as_mut() {
                dpatch.fill(0.0);
                for (co, &gv) in go.iter().enumerate() {
                    if gv != 0.0 {
                        axpy(&mut dpatch, f64::from(gv), &kt[co * p..(co + 1) * p]);
                    }
                }
                g.scatter(&dpatch, oy, ox, gx);
            }
            if let Some(gkt) = gkt.as_mut() {
                if !g.gather(x, oy, ox, &mut patch) {
                    continue;
                }
                for (co, &gv) in go.iter().enumerate() {
                    if gv != 0.0 {
                        axpy(&mut gkt[co * p..(co + 1) * p], f64::from(gv), &patch);
                    }
                }
            }
        }
    }
    let gk = gkt.map(|gkt| {
        let mut gk = vec![0f32; p * g.cout];
        for i in 0..p {
            for co in 0..g.cout {
                gk[i * g.cout + co] = gkt[co * p + i] as f32;
            }
        }
        gk
    });
    Ok((gx.map(|v| v.into_iter().map(|a| a as f32).collect()), gk))
}

/// Adds a per-channel bias to a `[H, W, C]` tensor.
pub fn add_channel_bias(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (h, w, c) = input.hwc("add_channel_bias")?;
    if bias.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "add_channel_bias",
            left: input.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let b = bias.data();
    let mut out = input.data().to_vec();
    for px in out.chunks_exact_mut(c) {
        for (v, &bv) in px.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Tensor::from_parts(vec![h, w, c], out, "add_channel_bias")
}

pub(crate) fn channel_bias_backward(grad_out: &[f32], channels: usize) -> Vec<f32> {
    let mut acc = vec![0f64; channels];
    for px in grad_out.chunks_exact(channels) {
        for (a, &g) in acc.iter_mut().zip(px) {
            *a += f64::from(g);
        }
    }
    acc.into_iter().map(|a| a as f32).collect()
}

pub fn relu(input: &Tensor) -> Tensor {
    // max(0, x) of finite values is finite.
    input.map("relu", |v| v.max(0.0)).expect("relu preserves finiteness")
}

pub(crate) fn relu_backward(output: &Tensor, grad_out: &[f32]) -> Vec<f32> {
    output
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect()
}

/// Sliding-window maximum per channel over a `[H, W, C]` tensor.
///
/// Out-of-bounds positions under `Same` padding are skipped rather than
/// treated as zeros.
pub fn maxpool(input: &Tensor, window: usize, stride: usize, padding: Padding) -> Result<Tensor> {
    maxpool_with_argmax(input, window, stride, padding).map(|(t, _)| t)
}

pub(crate) fn maxpool_with_argmax(
    input: &Tensor,
    window: usize,
    stride: usize,
    padding: Padding,
) -> Result<(Tensor, Vec<u32>)> {
    let (h, w, c) = input.hwc("maxpool")?;
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidArgument {
            op: "maxpool",
            reason: "window and stride must be at least 1".into(),
        });
    }
    if window > h || window > w {
        return Err(TensorError::InvalidArgument {
            op: "maxpool",
            reason: format!("window {window} exceeds input extent {h}x{w}"),
        });
    }
    let (oh, pad_top) = padding.geometry(h, window, stride).expect("validated");
    let (ow, pad_left) = padding.geometry(w, window, stride).expect("validated");
    let x = input.data();
    let mut out = vec![f32::NEG_INFINITY; oh * ow * c];
    let mut arg = vec![0u32; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let o_base = (oy * ow + ox) * c;
            for ky in 0..window {
                let Some(iy) = (oy * stride + ky).checked_sub(pad_top).filter(|&i| i < h) else {
                    continue;
                };
                for kx in 0..window {
                    let Some(ix) = (ox * stride + kx).checked_sub(pad_left).filter(|&i| i < w) else {
                        continue;
                    };
                    let i_base = (iy * w + ix) * c;
                    for ch in 0..c {
                        let v = x[i_base + ch];
                        if v > out[o_base + ch] {
                            out[o_base + ch] = v;
                            arg[o_base + ch] = (i_base + ch) as u32;
                        }
                    }
                }
            }
        }
    }
    Ok((Tensor::from_parts(vec![oh, ow, c], out, "maxpool")?, arg))
}

pub(crate) fn scatter_backward(input_len: usize, argmax: &[u32], grad_out: &[f32]) -> Vec<f32> {
    let mut g = vec![0f32; input_len];
    for (&i, &go) in argmax.iter().zip(grad_out) {
        g[i as usize] += go;
    }
    g
}

/// Global spatial maximum per channel: `[H, W, C] -> [C]`.
pub fn global_max_pool(input: &Tensor) -> Result<Tensor> {
    global_max_pool_with_argmax(input).map(|(t, _)| t)
}

pub(crate) fn global_max_pool_with_argmax(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (_, _, c) = input.hwc("global_max_pool")?;
    let x = input.data();
    let mut out = vec![f32::NEG_INFINITY; c];
    let mut arg = vec![0u32; c];
    for (p, px) in x.chunks_exact(c).enumerate() {
        for ch in 0..c {
            if px[ch] > out[ch] {
                out[ch] = px[ch];
                arg[ch] = (p * c + ch) as u32;
            }
        }
    }
    Ok((Tensor::from_parts(vec![c], out, "global_max_pool")?, arg))
}

/// Stacks `[H, W, Ci]` tensors along channels in argument order.
pub fn concat_channels(inputs: &[&Tensor]) -> Result<Tensor> {
    let first = inputs.first().ok_or_else(|| TensorError::InvalidArgument {
        op: "concat_channels",
        reason: "no inputs".into(),
    })?;
    let (h, w, _) = first.hwc("concat_channels")?;
    let mut widths = Vec::with_capacity(inputs.len());
    for t in inputs {
        let (th, tw, tc) = t.hwc("concat_channels")?;
        if (th, tw) != (h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: t.shape().to_vec(),
            });
        }
        widths.push(tc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for p in 0..h * w {
        for (t, &c) in inputs.iter().zip(&widths) {
            out.extend_from_slice(&t.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::from_parts(vec![h, w, total], out, "concat_channels")
}

/// Channels `[start, start + len)` of a `[H, W, C]` tensor.
pub fn slice_channels(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc("slice_channels")?;
    if len == 0 || start + len > c {
        return Err(TensorError::InvalidArgument {
            op: "slice_channels",
            reason: format!("range {start}..{} outside {c} channels", start + len),
        });
    }
    let mut out = Vec::with_capacity(h * w * len);
    for px in input.data().chunks_exact(c) {
        out.extend_from_slice(&px[start..start + len]);
    }
    Tensor::from_parts(vec![h, w, len], out, "slice_channels")
}

/// One channel of a `[H, W, C]` tensor as `[H, W]`.
pub fn channel(input: &Tensor, d: usize) -> Result<Tensor> {
    let (h, w, c) = input.hwc("channel")?;
    if d >= c {
        return Err(TensorError::InvalidArgument {
            op: "channel",
            reason: format!("channel {d} outside {c} channels"),
        });
    }
    let out = input.data().iter().skip(d).step_by(c).copied().collect();
    Tensor::from_parts(vec![h, w], out, "channel")
}

/// `input · weights + bias` for `input: [N]`, `weights: [N, M]`, `bias: [M]`.
pub fn dense(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "dense",
        left: input.shape().to_vec(),
        right: weights.shape().to_vec(),
    };
    let n = match input.shape()[..] {
        [n] => n,
        _ => return Err(mismatch()),
    };
    let m = match weights.shape()[..] {
        [wn, m] if wn == n => m,
        _ => return Err(mismatch()),
    };
    if bias.shape() != [m] {
        return Err(TensorError::ShapeMismatch {
            op: "dense",
            left: weights.shape().to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let x = input.data();
    let wt = weights.data();
    let mut acc: Vec<f64> = bias.data().iter().map(|&b| f64::from(b)).collect();
    for (i, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        let xv = f64::from(xv);
        for (a, &wv) in acc.iter_mut().zip(&wt[i * m..(i + 1) * m]) {
            *a += xv * f64::from(wv);
        }
    }
    Tensor::from_parts(vec![m], acc.into_iter().map(|a| a as f32).collect(), "dense")
}

pub(crate) fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &[f32],
    need_input: bool,
    need_weights: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let m = grad_out.len();
    let x = input.data();
    let wt = weights.data();
    let gx = need_input.then(|| {
        (0..x.len())
            .map(|i| {
                wt[i * m..(i + 1) * m]
                    .iter()
                    .zip(grad_out)
                    .map(|(&w, &g)| f64::from(w) * f64::from(g))
                    .sum::<f64>() as f32
            })
            .collect()
    });
    let gw = need_weights.then(|| {
        let mut gw = Vec::with_capacity(wt.len());
        for &xv in x {
            gw.extend(grad_out.iter().map(|&g| (f64::from(xv) * f64::from(g)) as f32));
        }
        gw
    });
    (gx, gw)
}

/// Numerically stable softmax probabilities in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&z| (f64::from(z) - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]`, evaluated with max subtraction.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<f32> {
    softmax_cross_entropy_with_probs(logits, target).map(|(l, _)| l)
}

pub(crate) fn softmax_cross_entropy_with_probs(logits: &Tensor, target: usize) -> Result<(f32, Vec<f64>)> {
    let k = match logits.shape()[..] {
        [k] => k,
        _ => {
            return Err(TensorError::InvalidArgument {
                op: "softmax_cross_entropy",
                reason: format!("logits must be rank 1, got {:?}", logits.shape()),
            })
        }
    };
    if target >= k {
        return Err(TensorError::InvalidArgument {
            op: "softmax_cross_entropy",
            reason: format!("target {target} outside {k} classes"),
        });
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let log_sum = z.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln() + max;
    let loss = (log_sum - f64::from(z[target])).max(0.0);
    let probs = softmax(z);
    if !loss.is_finite() {
        return Err(TensorError::NonFinite {
            op: "softmax_cross_entropy",
        });
    }
    Ok((loss as f32, probs))
}
