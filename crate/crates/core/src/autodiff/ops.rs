//! Dense kernels behind the tape ops: convolution, pooling, normalization.
//!
//! Convolutions are computed as shifted-window GEMMs: for each kernel offset
//! (ky, kx) the contribution is a small matrix product between a contiguous
//! input row segment and the [c_in, c_out] weight slab at that offset. No
//! im2col buffers, and every output element accumulates its terms in a fixed
//! (ky, kx, c_in) order, so results are bitwise reproducible.

use crate::linalg::gemm_acc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// Output spatial dims and (top, left) pad for a conv over (h, w).
pub(crate) fn conv_geometry(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    padding: Padding,
) -> Option<(usize, usize, usize, usize)> {
    match padding {
        Padding::Valid => {
            if h < kh || w < kw {
                return None;
            }
            Some((h - kh + 1, w - kw + 1, 0, 0))
        }
        // Symmetric zero padding; the extra row/column of an even deficit
        // goes on the bottom/right.
        Padding::Same => Some((h, w, (kh - 1) / 2, (kw - 1) / 2)),
    }
}

/// out[n, oh, ow, c_out] += conv(x[n, h, w, c_in], wgt[kh, kw, c_in, c_out]).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_forward(
    out: &mut [f64],
    x: &[f64],
    wgt: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    padding: Padding,
) {
    let (oh, ow, pt, pl) = conv_geometry(h, w, kh, kw, padding).expect("validated at build");
    for ky in 0..kh {
        for kx in 0..kw {
            let w_slab = &wgt[(ky * kw + kx) * cin * cout..(ky * kw + kx + 1) * cin * cout];
            let (oy0, oy1) = clip_range(oh, h, ky, pt);
            let (ox0, ox1) = clip_range(ow, w, kx, pl);
            if ox1 <= ox0 {
                continue;
            }
            let seg = ox1 - ox0;
            for img in 0..n {
                for oy in oy0..oy1 {
                    let iy = oy + ky - pt;
                    let ix0 = ox0 + kx - pl;
                    let x_off = ((img * h + iy) * w + ix0) * cin;
                    let y_off = ((img * oh + oy) * ow + ox0) * cout;
                    gemm_acc(
                        &mut out[y_off..y_off + seg * cout],
                        &x[x_off..x_off + seg * cin],
                        w_slab,
                        seg,
                        cin,
                        cout,
                    );
                }
            }
        }
    }
}

/// Valid output positions o such that o + k - pad lands inside [0, extent).
fn clip_range(out_extent: usize, in_extent: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (in_extent + pad - k).min(out_extent);
    (lo.min(hi), hi)
}

/// Gradients of the conv: accumulates into dx and dw.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    dx: &mut [f64],
    dw: &mut [f64],
    x: &[f64],
    wgt: &[f64],
    dout: &[f64],
    n: usize,
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    padding: Padding,
) {
    let (oh, ow, pt, pl) = conv_geometry(h, w, kh, kw, padding).expect("validated at build");
    // Small transposed weight slab reused across images.
    let mut wt = vec![0.0; cin * cout];
    for ky in 0..kh {
        for kx in 0..kw {
            let slab = (ky * kw + kx) * cin * cout;
            let w_slab = &wgt[slab..slab + cin * cout];
            for ci in 0..cin {
                for co in 0..cout {
                    wt[co * cin + ci] = w_slab[ci * cout + co];
                }
            }
            let (oy0, oy1) = clip_range(oh, h, ky, pt);
            let (ox0, ox1) = clip_range(ow, w, kx, pl);
            if ox1 <= ox0 {
                continue;
            }
            let seg = ox1 - ox0;
            for img in 0..n {
                for oy in oy0..oy1 {
                    let iy = oy + ky - pt;
                    let ix0 = ox0 + kx - pl;
                    let x_off = ((img * h + iy) * w + ix0) * cin;
                    let y_off = ((img * oh + oy) * ow + ox0) * cout;
                    let dy_seg = &dout[y_off..y_off + seg * cout];
                    // dX segment += dY segment * W^T
                    gemm_acc(
                        &mut dx[x_off..x_off + seg * cin],
                        dy_seg,
                        &wt,
                        seg,
                        cout,
                        cin,
                    );
                    // dW slab += X segment^T * dY segment
                    gemm_at_acc(
                        &mut dw[slab..slab + cin * cout],
                        &x[x_off..x_off + seg * cin],
                        dy_seg,
                        seg,
                        cin,
                        cout,
                    );
                }
            }
        }
    }
}

/// out[k, n] += a[p, k]^T * b[p, n]: rank-1 updates in ascending p order.
fn gemm_at_acc(out: &mut [f64], a: &[f64], b: &[f64], p: usize, k: usize, n: usize) {
    for pp in 0..p {
        let a_row = &a[pp * k..(pp + 1) * k];
        let b_row = &b[pp * n..(pp + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// 2x2 max pooling with stride 2. Returns (pooled, argmax indices into x).
/// Ties go to the first maximal element in row-major window order.
pub(crate) fn maxpool2x2_forward(
    x: &[f64],
    n: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; n * oh * ow * c];
    let mut arg = vec![0u32; n * oh * ow * c];
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ((img * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx as u32;
                            }
                        }
                    }
                    let o = ((img * oh + oy) * ow + ox) * c + ch;
                    out[o] = best;
                    arg[o] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

/// Per-channel batch statistics over all non-channel dims (channel = last dim).
pub(crate) fn channel_moments(x: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let m = x.len() / channels;
    let mut mean = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in mean.iter_mut() {
        *v /= m as f64;
    }
    let mut var = vec![0.0; channels];
    for row in x.chunks_exact(channels) {
        for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= m as f64;
    }
    (mean, var)
}
