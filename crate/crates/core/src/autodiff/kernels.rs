//! Raw compute kernels shared by forward and backward passes.
//!
//! All loops are single-threaded with a fixed accumulation order so repeated
//! runs are bit-identical.

use crate::tensor::Scalar;

/// Output spatial extent of a cross-correlation: floor((in + 2*pad - k)/stride) + 1.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Valid output range along one axis for a given kernel tap, so the inner loop
/// never branches on bounds: `iw = ow*stride + k - pad` must land in `[0, in)`.
fn tap_range(input: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let hi_num = input as isize - 1 + pad as isize - k as isize;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(out);
    (lo.min(hi), hi)
}

/// Cross-correlation. `x`: [N,Ci,H,W], `w`: [Co,Ci,KH,KW], `b`: [Co].
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (co, kh, kw): (usize, usize, usize),
    bias: Option<&[T]>,
    stride: usize,
    pad: usize,
    out: &mut [T],
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    for in_ in 0..n {
        for c_out in 0..co {
            let out_plane = &mut out[(in_ * co + c_out) * ho * wo..][..ho * wo];
            let b = bias.map_or(T::zero(), |b| b[c_out]);
            out_plane.fill(b);
            for c_in in 0..ci {
                let x_plane = &x[(in_ * ci + c_in) * h * w..][..h * w];
                for k_r in 0..kh {
                    for k_c in 0..kw {
                        let wv = wt[((c_out * ci + c_in) * kh + k_r) * kw + k_c];
                        let (ow_lo, ow_hi) = tap_range(w, wo, k_c, stride, pad);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        for oh in 0..ho {
                            let ih = oh * stride + k_r;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let x_row = &x_plane[(ih - pad) * w..][..w];
                            let out_row = &mut out_plane[oh * wo..][..wo];
                            if stride == 1 {
                                let iw_lo = ow_lo + k_c - pad;
                                let src = &x_row[iw_lo..iw_lo + len];
                                let dst = &mut out_row[ow_lo..ow_lo + len];
                                for i in 0..len {
                                    dst[i] += wv * src[i];
                                }
                            } else {
                                for ow in ow_lo..ow_hi {
                                    let iw = ow * stride + k_c - pad;
                                    out_row[ow] += wv * x_row[iw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv2d_forward`]. Accumulates into the provided grad buffers;
/// any of them may be absent.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
    g_out: &[T],
    mut g_x: Option<&mut [T]>,
    mut g_w: Option<&mut [T]>,
    g_b: Option<&mut [T]>,
) {
    let ho = conv_out_extent(h, kh, stride, pad);
    let wo = conv_out_extent(w, kw, stride, pad);
    if let Some(gb) = g_b {
        for in_ in 0..n {
            for c_out in 0..co {
                let g_plane = &g_out[(in_ * co + c_out) * ho * wo..][..ho * wo];
                let mut acc = T::zero();
                for &g in g_plane {
                    acc += g;
                }
                gb[c_out] += acc;
            }
        }
    }
    if g_x.is_none() && g_w.is_none() {
        return;
    }
    for in_ in 0..n {
        for c_out in 0..co {
            let g_plane = &g_out[(in_ * co + c_out) * ho * wo..][..ho * wo];
            for c_in in 0..ci {
                let x_plane = &x[(in_ * ci + c_in) * h * w..][..h * w];
                for k_r in 0..kh {
                    for k_c in 0..kw {
                        let widx = ((c_out * ci + c_in) * kh + k_r) * kw + k_c;
                        let wv = wt[widx];
                        let (ow_lo, ow_hi) = tap_range(w, wo, k_c, stride, pad);
                        if ow_hi <= ow_lo {
                            continue;
                        }
                        let len = ow_hi - ow_lo;
                        let mut w_acc = T::zero();
                        for oh in 0..ho {
                            let ih = oh * stride + k_r;
                            if ih < pad || ih - pad >= h {
                                continue;
                            }
                            let row_base = (ih - pad) * w;
                            let g_row = &g_plane[oh * wo..][..wo];
                            if let Some(gx) = g_x.as_deref_mut() {
                                let gx_plane = &mut gx[(in_ * ci + c_in) * h * w..][..h * w];
                                if stride == 1 {
                                    let iw_lo = ow_lo + k_c - pad;
                                    let dst = &mut gx_plane[row_base + iw_lo..][..len];
                                    let src = &g_row[ow_lo..ow_lo + len];
                                    for i in 0..len {
                                        dst[i] += wv * src[i];
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + k_c - pad;
                                        gx_plane[row_base + iw] += wv * g_row[ow];
                                    }
                                }
                            }
                            if g_w.is_some() {
                                if stride == 1 {
                                    let iw_lo = ow_lo + k_c - pad;
                                    let xs = &x_plane[row_base + iw_lo..][..len];
                                    let gs = &g_row[ow_lo..ow_lo + len];
                                    for i in 0..len {
                                        w_acc += gs[i] * xs[i];
                                    }
                                } else {
                                    for ow in ow_lo..ow_hi {
                                        let iw = ow * stride + k_c - pad;
                                        w_acc += g_row[ow] * x_plane[row_base + iw];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = g_w.as_deref_mut() {
                            gw[widx] += w_acc;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed convolution, stride 2, 2x2 kernel (the only configuration used).
/// `x`: [N,Ci,H,W], `w`: [Ci,Co,2,2], output [N,Co,2H,2W].
pub fn conv_transpose2d_forward<T: Scalar>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    co: usize,
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let (ho, wo) = (2 * h, 2 * w);
    for in_ in 0..n {
        for c_out in 0..co {
            let out_plane = &mut out[(in_ * co + c_out) * ho * wo..][..ho * wo];
            let b = bias.map_or(T::zero(), |b| b[c_out]);
            out_plane.fill(b);
            for c_in in 0..ci {
                let x_plane = &x[(in_ * ci + c_in) * h * w..][..h * w];
                for k_r in 0..2 {
                    for k_c in 0..2 {
                        let wv = wt[((c_in * co + c_out) * 2 + k_r) * 2 + k_c];
                        for ih in 0..h {
                            let out_row = &mut out_plane[(2 * ih + k_r) * wo..][..wo];
                            let x_row = &x_plane[ih * w..][..w];
                            for iw in 0..w {
                                out_row[2 * iw + k_c] += wv * x_row[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Backward of [`conv_transpose2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    (n, ci, h, w): (usize, usize, usize, usize),
    wt: &[T],
    co: usize,
    g_out: &[T],
    mut g_x: Option<&mut [T]>,
    mut g_w: Option<&mut [T]>,
    g_b: Option<&mut [T]>,
) {
    let (ho, wo) = (2 * h, 2 * w);
    if let Some(gb) = g_b {
        for in_ in 0..n {
            for c_out in 0..co {
                let g_plane = &g_out[(in_ * co + c_out) * ho * wo..][..ho * wo];
                let mut acc = T::zero();
                for &g in g_plane {
                    acc += g;
                }
                gb[c_out] += acc;
            }
        }
    }
    for in_ in 0..n {
        for c_out in 0..co {
            let g_plane = &g_out[(in_ * co + c_out) * ho * wo..][..ho * wo];
            for c_in in 0..ci {
                let x_plane = &x[(in_ * ci + c_in) * h * w..][..h * w];
                for k_r in 0..2 {
                    for k_c in 0..2 {
                        let widx = ((c_in * co + c_out) * 2 + k_r) * 2 + k_c;
                        let wv = wt[widx];
                        let mut w_acc = T::zero();
                        for ih in 0..h {
                            let g_row = &g_plane[(2 * ih + k_r) * wo..][..wo];
                            let x_row = &x_plane[ih * w..][..w];
                            if let Some(gx) = g_x.as_deref_mut() {
                                let gx_row =
                                    &mut gx[(in_ * ci + c_in) * h * w + ih * w..][..w];
                                for iw in 0..w {
                                    gx_row[iw] += wv * g_row[2 * iw + k_c];
                                }
                            }
                            if g_w.is_some() {
                                for iw in 0..w {
                                    w_acc += x_row[iw] * g_row[2 * iw + k_c];
                                }
                            }
                        }
                        if let Some(gw) = g_w.as_deref_mut() {
                            gw[widx] += w_acc;
                        }
                    }
                }
            }
        }
    }
}

/// Average pooling over full k x k windows. `x`: [N,C,H,W].
pub fn avg_pool2d_forward<T: Scalar>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    out: &mut [T],
) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let inv = T::one() / T::of_f64((k * k) as f64);
    for plane in 0..n * c {
        let x_plane = &x[plane * h * w..][..h * w];
        let out_plane = &mut out[plane * ho * wo..][..ho * wo];
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = T::zero();
                for k_r in 0..k {
                    let row = &x_plane[(oh * stride + k_r) * w + ow * stride..][..k];
                    for &v in row {
                        acc += v;
                    }
                }
                out_plane[oh * wo + ow] = acc * inv;
            }
        }
    }
}

pub fn avg_pool2d_backward<T: Scalar>(
    (n, c, h, w): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    g_out: &[T],
    g_x: &mut [T],
) {
    let ho = (h - k) / stride + 1;
    let wo = (w - k) / stride + 1;
    let inv = T::one() / T::of_f64((k * k) as f64);
    for plane in 0..n * c {
        let g_plane = &g_out[plane * ho * wo..][..ho * wo];
        let gx_plane = &mut g_x[plane * h * w..][..h * w];
        for oh in 0..ho {
            for ow in 0..wo {
                let g = g_plane[oh * wo + ow] * inv;
                for k_r in 0..k {
                    let row = &mut gx_plane[(oh * stride + k_r) * w + ow * stride..][..k];
                    for v in row {
                        *v += g;
                    }
                }
            }
        }
    }
}

/// Instance normalization statistics: per (sample, channel) mean and
/// 1/sqrt(var + eps) over the spatial dims, population variance.
pub fn instance_norm_stats<T: Scalar>(
    x: &[T],
    (n, c, h, w): (usize, usize, usize, usize),
    eps: T,
) -> Vec<T> {
    let m = h * w;
    let inv_m = T::one() / T::of_f64(m as f64);
    let mut stats = Vec::with_capacity(2 * n * c);
    for plane in 0..n * c {
        let xs = &x[plane * m..][..m];
        let mut mean = T::zero();
        for &v in xs {
            mean += v;
        }
        mean *= inv_m;
        let mut var = T::zero();
        for &v in xs {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_m;
        stats.push(mean);
        stats.push(T::one() / (var + eps).sqrt());
    }
    stats
}
