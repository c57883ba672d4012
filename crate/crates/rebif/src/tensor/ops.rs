//! Forward kernels and their exact backward rules.
//!
//! Conventions:
//! - convolution weights are `(c_out, c_in, k, k)` tensors, biases are
//!   `(1, c_out, 1, 1)` tensors (one value per output channel);
//! - convolution is cross-correlation (no kernel flip) with zero padding;
//! - every backward kernel computes the exact adjoint of its forward kernel,
//!   with a fixed accumulation order so results are reproducible bit-for-bit.
//!
//! The hot loops (convolution and its adjoints) run over contiguous row
//! slices so the compiler can vectorize them; reductions use a fixed
//! four-accumulator pattern. None of this changes results between runs: the
//! summation order is part of the kernel definition.

use super::rng::Rng;
use super::{Shape4, Tensor4, TensorError};

/// One convolution layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor4,
    pub bias: Tensor4,
    pub stride: usize,
    pub padding: usize,
}

impl ConvParams {
    pub fn new(
        weight: Tensor4,
        bias: Tensor4,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let ws = weight.shape();
        if ws.h != ws.w {
            return Err(TensorError::NonSquareKernel { h: ws.h, w: ws.w });
        }
        if ws.h != 1 && ws.h != 3 {
            return Err(TensorError::UnsupportedKernel { k: ws.h });
        }
        if bias.shape().count() != ws.n {
            return Err(TensorError::BiasMismatch {
                expected: ws.n,
                got: bias.shape().count(),
            });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// He-uniform weights, zero biases.
    pub fn he_init(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let weight = he_uniform(Shape4::new(c_out, c_in, k, k), rng);
        let bias = Tensor4::zeros(Shape4::new(1, c_out, 1, 1));
        ConvParams::new(weight, bias, stride, padding)
    }

    /// All-zero weights and biases (useful for collapse tests).
    pub fn zeros(
        c_out: usize,
        c_in: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        ConvParams::new(
            Tensor4::zeros(Shape4::new(c_out, c_in, k, k)),
            Tensor4::zeros(Shape4::new(1, c_out, 1, 1)),
            stride,
            padding,
        )
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape().n
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape().c
    }

    pub fn k(&self) -> usize {
        self.weight.shape().h
    }

    /// Number of learnable scalars (weights plus biases).
    pub fn param_count(&self) -> usize {
        self.weight.shape().count() + self.c_out()
    }
}

/// He-uniform init: uniform on `[-b, b]` with `b = sqrt(6 / fan_in)`, where
/// `fan_in = c_in * k * k` for a `(c_out, c_in, k, k)` weight shape.
pub fn he_uniform(shape: Shape4, rng: &mut Rng) -> Tensor4 {
    let bound = he_bound(shape.c * shape.h * shape.w);
    let mut t = Tensor4::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform(-bound, bound);
    }
    t
}

pub fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// Output length of a 1-D convolution along one spatial axis.
pub fn conv_out_len(
    len: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let padded = len + 2 * padding;
    if padded < k || !(padded - k).is_multiple_of(stride) {
        return Err(TensorError::NonIntegralOutput {
            len,
            k,
            stride,
            padding,
        });
    }
    Ok((padded - k) / stride + 1)
}

fn check_finite(t: &Tensor4, context: &'static str) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { context })
    }
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d(x: &Tensor4, p: &ConvParams) -> Result<Tensor4, TensorError> {
    conv2d_parts(x, &p.weight, &p.bias, p.stride, p.padding)
}

/// [`conv2d`] on loose weight/bias tensors; the tape calls this directly so
/// parameters are borrowed rather than bundled.
pub fn conv2d_parts(
    x: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    s: usize,
    pad: usize,
) -> Result<Tensor4, TensorError> {
    let xs = x.shape();
    let ws = weight.shape();
    if ws.h != ws.w {
        return Err(TensorError::NonSquareKernel { h: ws.h, w: ws.w });
    }
    if ws.h != 1 && ws.h != 3 {
        return Err(TensorError::UnsupportedKernel { k: ws.h });
    }
    if bias.shape().count() != ws.n {
        return Err(TensorError::BiasMismatch {
            expected: ws.n,
            got: bias.shape().count(),
        });
    }
    if s == 0 {
        return Err(TensorError::ZeroStride);
    }
    if xs.c != ws.c {
        return Err(TensorError::ChannelMismatch {
            expected: ws.c,
            got: xs.c,
        });
    }
    check_finite(x, "conv2d input")?;
    check_finite(weight, "conv2d weights")?;
    check_finite(bias, "conv2d bias")?;
    let k = ws.h;
    let oh = conv_out_len(xs.h, k, s, pad)?;
    let ow = conv_out_len(xs.w, k, s, pad)?;
    Ok(conv2d_exec(x, weight, bias, s, pad, oh, ow))
}

/// The conv engine behind [`conv2d_parts`]: shapes already validated.
///
/// Two loop orders cover the two cost regimes. When the output plane is wide
/// relative to the reduction length `c_in * k * k`, each kernel tap streams
/// one AXPY across the plane. Deep layers invert that: planes shrink to a
/// few pixels while the reduction grows into the thousands, so each output
/// element becomes one long dot product against a patch matrix instead.
fn conv2d_exec(
    x: &Tensor4,
    weight: &Tensor4,
    bias: &Tensor4,
    s: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor4 {
    let xs = x.shape();
    let ws = weight.shape();
    let k = ws.h;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ws.n, oh, ow));
    let reduction = xs.c * k * k;
    let plane = oh * ow;

    if reduction >= plane {
        let mut patches = vec![0.0; plane * reduction];
        for ni in 0..xs.n {
            fill_patch_rows(&mut patches, x, ni, k, s, pad, (oh, ow));
            for oc in 0..ws.n {
                let wrow = &weight.data()[oc * reduction..(oc + 1) * reduction];
                let bv = bias.data()[oc];
                let op = out.plane_mut(ni, oc);
                for (o, prow) in op.iter_mut().zip(patches.chunks_exact(reduction)) {
                    *o = bv + dot(wrow, prow);
                }
            }
        }
    } else {
        for ni in 0..xs.n {
            for oc in 0..ws.n {
                let op = out.plane_mut(ni, oc);
                op.fill(bias.data()[oc]);
                if k == 1 && s == 1 && pad == 0 {
                    // Pure channel mix: one AXPY per input channel.
                    for ci in 0..xs.c {
                        axpy(op, x.plane(ni, ci), weight.at(oc, ci, 0, 0));
                    }
                } else {
                    for ci in 0..xs.c {
                        let xp = x.plane(ni, ci);
                        for ky in 0..k {
                            for kx in 0..k {
                                let wv = weight.at(oc, ci, ky, kx);
                                accumulate_shifted(
                                    op,
                                    xp,
                                    wv,
                                    (oh, ow),
                                    (xs.h, xs.w),
                                    (ky, kx),
                                    s,
                                    pad,
                                );
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fills `dst` with one row per output position holding that position's
/// flattened receptive field (channel-major, then ky, then kx), zeros where
/// a tap falls outside the input. Row length is `c * k * k`.
fn fill_patch_rows(
    dst: &mut [f64],
    x: &Tensor4,
    ni: usize,
    k: usize,
    s: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let xs = x.shape();
    let reduction = xs.c * k * k;
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut dst[(oy * ow + ox) * reduction..(oy * ow + ox + 1) * reduction];
            for ci in 0..xs.c {
                let xp = x.plane(ni, ci);
                for ky in 0..k {
                    let iy = oy * s + ky;
                    let seg = &mut row[(ci * k + ky) * k..(ci * k + ky + 1) * k];
                    if iy < pad || iy - pad >= xs.h {
                        seg.fill(0.0);
                        continue;
                    }
                    let xrow = &xp[(iy - pad) * xs.w..(iy - pad + 1) * xs.w];
                    for (kx, sv) in seg.iter_mut().enumerate() {
                        let ix = ox * s + kx;
                        *sv = if ix < pad || ix - pad >= xs.w {
                            0.0
                        } else {
                            xrow[ix - pad]
                        };
                    }
                }
            }
        }
    }
}

/// y += a * x over matching slices; the workhorse of the wide-plane path.
#[inline]
fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = a.mul_add(*xv, *yv);
    }
}

/// out[oy][ox] += wv * in[oy*s + ky - pad][ox*s + kx - pad] over valid indices.
#[allow(clippy::too_many_arguments)]
#[inline]
fn accumulate_shifted(
    out: &mut [f64],
    input: &[f64],
    wv: f64,
    (oh, ow): (usize, usize),
    (ih, iw): (usize, usize),
    (ky, kx): (usize, usize),
    s: usize,
    pad: usize,
) {
    // Valid output range along one axis: 0 <= o*s + kq - pad < in_len.
    let range = |k_off: usize, o_len: usize, i_len: usize| -> (usize, usize) {
        let lo = if pad > k_off {
            (pad - k_off).div_ceil(s)
        } else {
            0
        };
        // Largest valid o satisfies o*s <= i_len + pad - k_off - 1; on tiny
        // inputs a far kernel tap may never land (i_len + pad <= k_off).
        let span = (i_len + pad).saturating_sub(k_off);
        if span == 0 {
            return (0, 0);
        }
        (lo, ((span - 1) / s + 1).min(o_len))
    };
    let (oy_lo, oy_hi) = range(ky, oh, ih);
    let (ox_lo, ox_hi) = range(kx, ow, iw);
    if oy_lo >= oy_hi || ox_lo >= ox_hi {
        return;
    }
    for oy in oy_lo..oy_hi {
        let iy = oy * s + ky - pad;
        let orow = &mut out[oy * ow..(oy + 1) * ow];
        let irow = &input[iy * iw..(iy + 1) * iw];
        if s == 1 {
            let ix0 = ox_lo + kx - pad;
            let len = ox_hi - ox_lo;
            for (o, xv) in orow[ox_lo..ox_hi].iter_mut().zip(&irow[ix0..ix0 + len]) {
                *o = wv.mul_add(*xv, *o);
            }
        } else {
            for ox in ox_lo..ox_hi {
                let ix = ox * s + kx - pad;
                orow[ox] = wv.mul_add(irow[ix], orow[ox]);
            }
        }
    }
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub struct ConvGrads {
    pub dx: Tensor4,
    pub dw: Tensor4,
    pub db: Tensor4,
}

pub fn conv2d_backward(x: &Tensor4, p: &ConvParams, grad_out: &Tensor4) -> ConvGrads {
    ConvGrads {
        dx: conv2d_grad_x(&p.weight, grad_out, x.shape(), p.stride, p.padding),
        dw: conv2d_grad_w(x, grad_out, p.weight.shape(), p.stride, p.padding),
        db: conv2d_grad_b(grad_out),
    }
}

/// dL/dx given dL/dout: the adjoint of the forward correlation.
pub fn conv2d_grad_x(
    weight: &Tensor4,
    grad_out: &Tensor4,
    x_shape: Shape4,
    s: usize,
    pad: usize,
) -> Tensor4 {
    let ws = weight.shape();
    let gs = grad_out.shape();
    let k = ws.h;
    // The stride-1 adjoint is itself a stride-1 convolution: correlate the
    // output gradient with the spatially flipped, channel-transposed kernel
    // at complementary padding. That reuses the shape-adaptive forward
    // engine; anything else falls through to the scatter loops below.
    if s == 1
        && k > pad
        && gs.n == x_shape.n
        && gs.c == ws.n
        && x_shape.c == ws.c
        && conv_out_len(gs.h, k, 1, k - 1 - pad) == Ok(x_shape.h)
        && conv_out_len(gs.w, k, 1, k - 1 - pad) == Ok(x_shape.w)
    {
        let flipped = flip_transpose(weight);
        let zero_bias = Tensor4::zeros(Shape4::new(1, 1, 1, ws.c));
        return conv2d_exec(
            grad_out,
            &flipped,
            &zero_bias,
            1,
            k - 1 - pad,
            x_shape.h,
            x_shape.w,
        );
    }
    let mut gx = Tensor4::zeros(x_shape);
    for ni in 0..x_shape.n {
        for ci in 0..x_shape.c {
            let gxp = gx.plane_mut(ni, ci);
            for oc in 0..ws.n {
                let gop = grad_out.plane(ni, oc);
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = weight.at(oc, ci, ky, kx);
                        if s == 1 {
                            // gx[iy][ix] += wv * go[iy + pad - ky][ix + pad - kx]
                            // is the same shifted AXPY with the roles swapped.
                            scatter_shifted_s1(
                                gxp,
                                gop,
                                wv,
                                (x_shape.h, x_shape.w),
                                (gs.h, gs.w),
                                (ky, kx),
                                pad,
                            );
                        } else {
                            for oy in 0..gs.h {
                                let iy = oy * s + ky;
                                if iy < pad || iy - pad >= x_shape.h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for ox in 0..gs.w {
                                    let ix = ox * s + kx;
                                    if ix < pad || ix - pad >= x_shape.w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    gxp[iy * x_shape.w + ix] =
                                        wv.mul_add(gop[oy * gs.w + ox], gxp[iy * x_shape.w + ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

/// The kernel with input/output channels swapped and both spatial axes
/// reversed: correlating with this at complementary padding computes the
/// stride-1 input gradient.
fn flip_transpose(weight: &Tensor4) -> Tensor4 {
    let ws = weight.shape();
    let k = ws.h;
    let mut out = Tensor4::zeros(Shape4::new(ws.c, ws.n, k, k));
    for oc in 0..ws.n {
        for ci in 0..ws.c {
            for ky in 0..k {
                for kx in 0..k {
                    let idx = out.shape().idx(ci, oc, k - 1 - ky, k - 1 - kx);
                    out.data_mut()[idx] = weight.at(oc, ci, ky, kx);
                }
            }
        }
    }
    out
}

/// gx[iy][ix] += wv * go[iy + pad - ky][ix + pad - kx], stride-1 case.
#[inline]
fn scatter_shifted_s1(
    gx: &mut [f64],
    go: &[f64],
    wv: f64,
    (ih, iw): (usize, usize),
    (oh, ow): (usize, usize),
    (ky, kx): (usize, usize),
    pad: usize,
) {
    // Valid input range: 0 <= i + pad - k < o_len.
    let range = |k_off: usize, i_len: usize, o_len: usize| -> (usize, usize) {
        let lo = k_off.saturating_sub(pad);
        let hi = (o_len + k_off - pad).min(i_len); // o_len + k_off >= pad whenever anything is valid
        (lo, hi)
    };
    let (iy_lo, iy_hi) = range(ky, ih, oh);
    let (ix_lo, ix_hi) = range(kx, iw, ow);
    if iy_lo >= iy_hi || ix_lo >= ix_hi {
        return;
    }
    for iy in iy_lo..iy_hi {
        let oy = iy + pad - ky;
        let gxrow = &mut gx[iy * iw..(iy + 1) * iw];
        let gorow = &go[oy * ow..(oy + 1) * ow];
        let ox0 = ix_lo + pad - kx;
        let len = ix_hi - ix_lo;
        for (g, ov) in gxrow[ix_lo..ix_hi].iter_mut().zip(&gorow[ox0..ox0 + len]) {
            *g = wv.mul_add(*ov, *g);
        }
    }
}

/// dL/dweight given dL/dout.
///
/// Mirrors the forward engine's two regimes. Deep layers (short planes,
/// long kernels) accumulate one patch-row AXPY per output position into the
/// flat kernel row; wide layers compute each kernel element as one long dot
/// against the output-gradient plane.
pub fn conv2d_grad_w(
    x: &Tensor4,
    grad_out: &Tensor4,
    w_shape: Shape4,
    s: usize,
    pad: usize,
) -> Tensor4 {
    let xs = x.shape();
    let gs = grad_out.shape();
    let k = w_shape.h;
    let reduction = w_shape.c * k * k;
    let plane = gs.h * gs.w;
    let mut gw = Tensor4::zeros(w_shape);
    if reduction >= plane {
        let mut patches = vec![0.0; plane * reduction];
        for ni in 0..xs.n {
            fill_patch_rows(&mut patches, x, ni, k, s, pad, (gs.h, gs.w));
            for oc in 0..w_shape.n {
                let gop = grad_out.plane(ni, oc);
                let grow = &mut gw.data_mut()[oc * reduction..(oc + 1) * reduction];
                for (gv, prow) in gop.iter().zip(patches.chunks_exact(reduction)) {
                    axpy(grow, prow, *gv);
                }
            }
        }
    } else {
        let mut patches = vec![0.0; reduction * plane];
        for ni in 0..xs.n {
            fill_patch_cols(&mut patches, x, ni, k, s, pad, (gs.h, gs.w));
            for oc in 0..w_shape.n {
                let gop = grad_out.plane(ni, oc);
                let grow = &mut gw.data_mut()[oc * reduction..(oc + 1) * reduction];
                for (gv, pcol) in grow.iter_mut().zip(patches.chunks_exact(plane)) {
                    *gv += dot(gop, pcol);
                }
            }
        }
    }
    gw
}

/// The transpose of [`fill_patch_rows`]: one row per kernel tap `(ci, ky,
/// kx)` holding that tap's input value at every output position (zero where
/// the tap falls outside the input).
fn fill_patch_cols(
    dst: &mut [f64],
    x: &Tensor4,
    ni: usize,
    k: usize,
    s: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) {
    let xs = x.shape();
    let plane = oh * ow;
    for ci in 0..xs.c {
        let xp = x.plane(ni, ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut dst[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = oy * s + ky;
                    let seg = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < pad || iy - pad >= xs.h {
                        seg.fill(0.0);
                        continue;
                    }
                    let xrow = &xp[(iy - pad) * xs.w..(iy - pad + 1) * xs.w];
                    for (ox, sv) in seg.iter_mut().enumerate() {
                        let ix = ox * s + kx;
                        *sv = if ix < pad || ix - pad >= xs.w {
                            0.0
                        } else {
                            xrow[ix - pad]
                        };
                    }
                }
            }
        }
    }
}

/// dL/dbias given dL/dout: per-channel sum.
pub fn conv2d_grad_b(grad_out: &Tensor4) -> Tensor4 {
    let gs = grad_out.shape();
    let mut gb = Tensor4::zeros(Shape4::new(1, gs.c, 1, 1));
    for ni in 0..gs.n {
        for c in 0..gs.c {
            let sum: f64 = grad_out.plane(ni, c).iter().sum();
            gb.data_mut()[c] += sum;
        }
    }
    gb
}

/// Dot product with a fixed four-accumulator order (part of the kernel
/// definition; identical on every run).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 4];
    let quads = n / 4;
    for i in 0..quads {
        let j = i * 4;
        acc[0] = a[j].mul_add(b[j], acc[0]);
        acc[1] = a[j + 1].mul_add(b[j + 1], acc[1]);
        acc[2] = a[j + 2].mul_add(b[j + 2], acc[2]);
        acc[3] = a[j + 3].mul_add(b[j + 3], acc[3]);
    }
    let mut tail = 0.0;
    for j in quads * 4..n {
        tail = a[j].mul_add(b[j], tail);
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Winning input positions of a [`maxpool2`] call, for exact gradient routing.
#[derive(Clone, Debug)]
pub struct PoolRecord {
    pub input_shape: Shape4,
    /// For each output element (row-major), the flat index into the input's
    /// data of the cell that won its 2x2 window. Ties go to the smallest
    /// row-major index.
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2.
pub fn maxpool2(x: &Tensor4) -> Result<(Tensor4, PoolRecord), TensorError> {
    let xs = x.shape();
    if !xs.h.is_multiple_of(2) || !xs.w.is_multiple_of(2) {
        return Err(TensorError::OddSpatial { h: xs.h, w: xs.w });
    }
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c, oh, ow));
    let mut argmax = vec![0usize; out.shape().count()];
    let mut oi = 0;
    for ni in 0..xs.n {
        for c in 0..xs.c {
            let xp = x.plane(ni, c);
            let base = (ni * xs.c + c) * xs.h * xs.w;
            let op = out.plane_mut(ni, c);
            for oy in 0..oh {
                let r0 = 2 * oy * xs.w;
                let r1 = r0 + xs.w;
                for ox in 0..ow {
                    let c0 = 2 * ox;
                    // Window cells in row-major input order; strict `>` keeps
                    // the earliest (smallest index) on ties.
                    let mut best = xp[r0 + c0];
                    let mut best_at = r0 + c0;
                    for cand in [r0 + c0 + 1, r1 + c0, r1 + c0 + 1] {
                        if xp[cand] > best {
                            best = xp[cand];
                            best_at = cand;
                        }
                    }
                    op[oy * ow + ox] = best;
                    argmax[oi] = base + best_at;
                    oi += 1;
                }
            }
        }
    }
    Ok((
        out,
        PoolRecord {
            input_shape: xs,
            argmax,
        },
    ))
}

/// Routes output gradients back to the recorded window winners.
pub fn maxpool2_backward(record: &PoolRecord, grad_out: &Tensor4) -> Tensor4 {
    let mut gx = Tensor4::zeros(record.input_shape);
    for (g, &at) in grad_out.data().iter().zip(&record.argmax) {
        gx.data_mut()[at] += g;
    }
    gx
}

/// Nearest-neighbor 2x upsampling: each input cell becomes a 2x2 block.
pub fn upsample_nearest2(x: &Tensor4) -> Tensor4 {
    let xs = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c, xs.h * 2, xs.w * 2));
    let ow = xs.w * 2;
    for ni in 0..xs.n {
        for c in 0..xs.c {
            let xp = x.plane(ni, c);
            let op = out.plane_mut(ni, c);
            for y in 0..xs.h {
                let xrow = &xp[y * xs.w..(y + 1) * xs.w];
                let (top, bottom) = op[2 * y * ow..(2 * y + 2) * ow].split_at_mut(ow);
                for (x_idx, &v) in xrow.iter().enumerate() {
                    top[2 * x_idx] = v;
                    top[2 * x_idx + 1] = v;
                    bottom[2 * x_idx] = v;
                    bottom[2 * x_idx + 1] = v;
                }
            }
        }
    }
    out
}

/// Adjoint of [`upsample_nearest2`]: sums each 2x2 output block.
pub fn upsample_nearest2_backward(grad_out: &Tensor4) -> Result<Tensor4, TensorError> {
    let gs = grad_out.shape();
    if !gs.h.is_multiple_of(2) || !gs.w.is_multiple_of(2) {
        return Err(TensorError::OddSpatial { h: gs.h, w: gs.w });
    }
    let (ih, iw) = (gs.h / 2, gs.w / 2);
    let mut gx = Tensor4::zeros(Shape4::new(gs.n, gs.c, ih, iw));
    for ni in 0..gs.n {
        for c in 0..gs.c {
            let gop = grad_out.plane(ni, c);
            let gxp = gx.plane_mut(ni, c);
            for y in 0..ih {
                let top = &gop[2 * y * gs.w..(2 * y + 1) * gs.w];
                let bottom = &gop[(2 * y + 1) * gs.w..(2 * y + 2) * gs.w];
                for x_idx in 0..iw {
                    gxp[y * iw + x_idx] = (top[2 * x_idx] + top[2 * x_idx + 1])
                        + (bottom[2 * x_idx] + bottom[2 * x_idx + 1]);
                }
            }
        }
    }
    Ok(gx)
}

/// Splits each channel into its four stride-2 phase sub-patches:
/// `(n, c, h, w)` -> `(n, 4c, h/2, w/2)`, with input channel `ci` mapping to
/// output channels `4*ci + phase` for phases `(0,0), (0,1), (1,0), (1,1)`.
pub fn space_to_depth2(x: &Tensor4) -> Result<Tensor4, TensorError> {
    let xs = x.shape();
    if !xs.h.is_multiple_of(2) || !xs.w.is_multiple_of(2) {
        return Err(TensorError::OddSpatial { h: xs.h, w: xs.w });
    }
    let (oh, ow) = (xs.h / 2, xs.w / 2);
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c * 4, oh, ow));
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let xp = x.plane(ni, ci);
            for (phase, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let op = out.plane_mut(ni, ci * 4 + phase);
                for oy in 0..oh {
                    let irow = &xp[(2 * oy + dy) * xs.w..(2 * oy + dy + 1) * xs.w];
                    let orow = &mut op[oy * ow..(oy + 1) * ow];
                    for (o, chunk) in orow.iter_mut().zip(irow[dx..].chunks(2)) {
                        *o = chunk[0];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth2`]: `(n, 4c, h, w)` -> `(n, c, 2h, 2w)`.
pub fn depth_to_space2(x: &Tensor4) -> Result<Tensor4, TensorError> {
    let xs = x.shape();
    if !xs.c.is_multiple_of(4) {
        return Err(TensorError::ChannelNotDivisibleBy4 { c: xs.c });
    }
    let (oh, ow) = (xs.h * 2, xs.w * 2);
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c / 4, oh, ow));
    for ni in 0..xs.n {
        for co in 0..xs.c / 4 {
            let op = out.plane_mut(ni, co);
            for (phase, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let xp = x.plane(ni, co * 4 + phase);
                for y in 0..xs.h {
                    let irow = &xp[y * xs.w..(y + 1) * xs.w];
                    let orow = &mut op[(2 * y + dy) * ow..(2 * y + dy + 1) * ow];
                    for (x_idx, &v) in irow.iter().enumerate() {
                        orow[2 * x_idx + dx] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Width-only analog of [`space_to_depth2`] for single-row signals:
/// `(n, c, h, w)` -> `(n, 2c, h, w/2)`, with input channel `ci` mapping to
/// output channels `2*ci + phase` for column phases `0, 1`.
pub fn space_to_depth_w2(x: &Tensor4) -> Result<Tensor4, TensorError> {
    let xs = x.shape();
    if !xs.w.is_multiple_of(2) {
        return Err(TensorError::OddWidth { w: xs.w });
    }
    let ow = xs.w / 2;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c * 2, xs.h, ow));
    for ni in 0..xs.n {
        for ci in 0..xs.c {
            let xp = x.plane(ni, ci);
            for phase in 0..2 {
                let op = out.plane_mut(ni, ci * 2 + phase);
                for y in 0..xs.h {
                    let irow = &xp[y * xs.w..(y + 1) * xs.w];
                    let orow = &mut op[y * ow..(y + 1) * ow];
                    for (o, chunk) in orow.iter_mut().zip(irow[phase..].chunks(2)) {
                        *o = chunk[0];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`space_to_depth_w2`].
pub fn depth_to_space_w2(x: &Tensor4) -> Result<Tensor4, TensorError> {
    let xs = x.shape();
    if !xs.c.is_multiple_of(2) {
        return Err(TensorError::ChannelNotDivisibleBy2 { c: xs.c });
    }
    let ow = xs.w * 2;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c / 2, xs.h, ow));
    for ni in 0..xs.n {
        for co in 0..xs.c / 2 {
            let op = out.plane_mut(ni, co);
            for phase in 0..2 {
                let xp = x.plane(ni, co * 2 + phase);
                for y in 0..xs.h {
                    let irow = &xp[y * xs.w..(y + 1) * xs.w];
                    let orow = &mut op[y * ow..(y + 1) * ow];
                    for (x_idx, &v) in irow.iter().enumerate() {
                        orow[2 * x_idx + phase] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Concatenates along the channel axis in argument order.
pub fn concat_channels(xs: &[&Tensor4]) -> Result<Tensor4, TensorError> {
    let first = *xs.first().ok_or(TensorError::EmptyConcat)?;
    let fs = first.shape();
    let mut c_total = 0;
    for t in xs {
        let ts = t.shape();
        for (axis, l, r) in [("n", fs.n, ts.n), ("h", fs.h, ts.h), ("w", fs.w, ts.w)] {
            if l != r {
                return Err(TensorError::ConcatMismatch {
                    axis,
                    left: l,
                    right: r,
                });
            }
        }
        c_total += ts.c;
    }
    let mut out = Tensor4::zeros(Shape4::new(fs.n, c_total, fs.h, fs.w));
    for ni in 0..fs.n {
        let mut c_off = 0;
        for t in xs {
            for ci in 0..t.shape().c {
                out.plane_mut(ni, c_off + ci).copy_from_slice(t.plane(ni, ci));
            }
            c_off += t.shape().c;
        }
    }
    Ok(out)
}

/// Splits an upstream gradient back into per-input channel blocks.
pub fn concat_channels_backward(grad_out: &Tensor4, part_channels: &[usize]) -> Vec<Tensor4> {
    let gs = grad_out.shape();
    let mut parts = Vec::with_capacity(part_channels.len());
    let mut c_off = 0;
    for &pc in part_channels {
        let mut part = Tensor4::zeros(Shape4::new(gs.n, pc, gs.h, gs.w));
        for ni in 0..gs.n {
            for ci in 0..pc {
                part.plane_mut(ni, ci)
                    .copy_from_slice(grad_out.plane(ni, c_off + ci));
            }
        }
        c_off += pc;
        parts.push(part);
    }
    parts
}

/// Leaky ReLU; the positive branch applies at exactly 0.
pub fn leaky_relu(x: &Tensor4, slope: f64) -> Result<Tensor4, TensorError> {
    if !slope.is_finite() || slope < 0.0 {
        return Err(TensorError::NegativeSlope { slope });
    }
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v *= slope;
        }
    }
    Ok(out)
}

pub fn leaky_relu_backward(x: &Tensor4, slope: f64, grad_out: &Tensor4) -> Tensor4 {
    let mut gx = grad_out.clone();
    for (g, xv) in gx.data_mut().iter_mut().zip(x.data()) {
        if *xv < 0.0 {
            *g *= slope;
        }
    }
    gx
}

/// Element-wise sum of two same-shape tensors.
pub fn add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4, TensorError> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = a.clone();
    for (o, bv) in out.data_mut().iter_mut().zip(b.data()) {
        *o += bv;
    }
    Ok(out)
}
