//! Hot compute kernels behind the graph operations.
//!
//! Everything here works on plain slices in row-major layout and accumulates
//! with a fixed order, so results are bitwise reproducible regardless of
//! thread count. Interior columns of the correlation kernels run branch-free
//! so the compiler can vectorize them; borders are handled separately.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Largest supported kernel extent (stack tap buffers).
pub(crate) const MAX_K: usize = 15;

/// Work size above which per-plane parallelism pays for itself.
const PAR_THRESHOLD: usize = 1 << 15;

/// `out[i] += a * x[i]`.
pub(crate) fn axpy<S: Scalar>(out: &mut [S], a: S, x: &[S]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, xi) in out.iter_mut().zip(x) {
        *o = *o + a * *xi;
    }
}

/// Lane-accumulated dot product (fixed reassociation, vectorizable).
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    const LANES: usize = 16;
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / LANES;
    let mut acc = [S::zero(); LANES];
    for i in 0..chunks {
        let ao = &a[i * LANES..(i + 1) * LANES];
        let bo = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + ao[l] * bo[l];
        }
    }
    let mut s = S::zero();
    for l in 0..LANES {
        s = s + acc[l];
    }
    for i in chunks * LANES..n {
        s = s + a[i] * b[i];
    }
    s
}

/// Lane-accumulated sum.
pub(crate) fn sum<S: Scalar>(a: &[S]) -> S {
    const LANES: usize = 16;
    let n = a.len();
    let chunks = n / LANES;
    let mut acc = [S::zero(); LANES];
    for i in 0..chunks {
        let ao = &a[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] = acc[l] + ao[l];
        }
    }
    let mut s = S::zero();
    for l in 0..LANES {
        s = s + acc[l];
    }
    for i in chunks * LANES..n {
        s = s + a[i];
    }
    s
}

#[inline]
fn middle_acc<S: Scalar, const K: usize>(out: &mut [S], inp: &[S], taps: &[S]) {
    let mut t = [S::zero(); K];
    t.copy_from_slice(&taps[..K]);
    for (o, win) in out.iter_mut().zip(inp.windows(K)) {
        let mut acc = S::zero();
        for k in 0..K {
            acc = acc + t[k] * win[k];
        }
        *o = *o + acc;
    }
}

#[inline]
fn middle_acc_dyn<S: Scalar>(out: &mut [S], inp: &[S], taps: &[S]) {
    let k = taps.len();
    for (o, win) in out.iter_mut().zip(inp.windows(k)) {
        let mut acc = S::zero();
        for (t, v) in taps.iter().zip(win) {
            acc = acc + *t * *v;
        }
        *o = *o + acc;
    }
}

/// `out[x] += Σ_kx taps[kx] · inp[x + kx − pad]` with zero padding.
///
/// `out` and `inp` are rows of equal length; `taps.len() == 2·pad + 1`.
pub(crate) fn corr_row_acc<S: Scalar>(out: &mut [S], inp: &[S], taps: &[S], pad: usize) {
    let w = out.len();
    let k = taps.len();
    debug_assert_eq!(inp.len(), w);
    debug_assert_eq!(k, 2 * pad + 1);

    let mut border = |x: usize| {
        let mut acc = S::zero();
        for (kx, &t) in taps.iter().enumerate() {
            let ix = x + kx;
            if ix >= pad && ix - pad < w {
                acc = acc + t * inp[ix - pad];
            }
        }
        out[x] = out[x] + acc;
    };
    let left_end = pad.min(w);
    for x in 0..left_end {
        border(x);
    }
    let right_start = w.saturating_sub(pad).max(left_end);
    for x in right_start..w {
        border(x);
    }

    // Interior: all taps in range, branch-free over the row.
    if w >= k {
        let out_mid = &mut out[pad..w - pad];
        match k {
            1 => middle_acc::<S, 1>(out_mid, inp, taps),
            3 => middle_acc::<S, 3>(out_mid, inp, taps),
            5 => middle_acc::<S, 5>(out_mid, inp, taps),
            7 => middle_acc::<S, 7>(out_mid, inp, taps),
            _ => middle_acc_dyn(out_mid, inp, taps),
        }
    }
}

/// Runs `f(plane_index, plane)` over consecutive planes of `buf`, in parallel
/// when the work is large enough. Each plane is written by exactly one task,
/// so the output is identical for any thread count.
fn for_each_plane<S: Send, F: Fn(usize, &mut [S]) + Sync>(
    buf: &mut [S],
    plane: usize,
    work_per_plane: usize,
    f: F,
) {
    #[cfg(feature = "parallel")]
    {
        if work_per_plane >= PAR_THRESHOLD && buf.len() / plane > 1 {
            buf.par_chunks_exact_mut(plane)
                .enumerate()
                .for_each(|(i, p)| f(i, p));
            return;
        }
    }
    let _ = work_per_plane;
    for (i, p) in buf.chunks_exact_mut(plane).enumerate() {
        f(i, p);
    }
}

/// 2-D same-padding cross-correlation: `out[co] = bias[co] + Σ_ci inp[ci] ⋆ wgt[co,ci]`.
pub(crate) fn conv2d_fwd<S: Scalar>(
    inp: &[S],
    c_in: usize,
    h: usize,
    w: usize,
    wgt: &[S],
    c_out: usize,
    k: usize,
    bias: &[S],
    out: &mut [S],
) {
    let plane = h * w;
    let pad = k / 2;
    for_each_plane(out, plane, plane * c_in * k * k, |co, out_plane| {
        out_plane.fill(bias[co]);
        for ci in 0..c_in {
            let in_plane = &inp[ci * plane..(ci + 1) * plane];
            let wbase = (co * c_in + ci) * k * k;
            for ky in 0..k {
                let taps = &wgt[wbase + ky * k..wbase + (ky + 1) * k];
                let y0 = pad.saturating_sub(ky);
                let y1 = (h + pad).saturating_sub(ky).min(h);
                for y in y0..y1 {
                    let iy = y + ky - pad;
                    corr_row_acc(
                        &mut out_plane[y * w..(y + 1) * w],
                        &in_plane[iy * w..(iy + 1) * w],
                        taps,
                        pad,
                    );
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution input (full correlation with the flipped
/// kernel), accumulated into `dinp`.
pub(crate) fn conv2d_bwd_input<S: Scalar>(
    gout: &[S],
    c_out: usize,
    h: usize,
    w: usize,
    wgt: &[S],
    c_in: usize,
    k: usize,
    dinp: &mut [S],
) {
    let plane = h * w;
    let pad = k / 2;
    assert!(k <= MAX_K);
    for_each_plane(dinp, plane, plane * c_out * k * k, |ci, din_plane| {
        for co in 0..c_out {
            let g_plane = &gout[co * plane..(co + 1) * plane];
            let wbase = (co * c_in + ci) * k * k;
            for kyf in 0..k {
                let src = &wgt[wbase + (k - 1 - kyf) * k..wbase + (k - kyf) * k];
                let mut taps = [S::zero(); MAX_K];
                for i in 0..k {
                    taps[i] = src[k - 1 - i];
                }
                let y0 = pad.saturating_sub(kyf);
                let y1 = (h + pad).saturating_sub(kyf).min(h);
                for iy in y0..y1 {
                    let gy = iy + kyf - pad;
                    corr_row_acc(
                        &mut din_plane[iy * w..(iy + 1) * w],
                        &g_plane[gy * w..(gy + 1) * w],
                        &taps[..k],
                        pad,
                    );
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution weights, accumulated into `dwgt`.
pub(crate) fn conv2d_bwd_weight<S: Scalar>(
    gout: &[S],
    c_out: usize,
    h: usize,
    w: usize,
    inp: &[S],
    c_in: usize,
    k: usize,
    dwgt: &mut [S],
) {
    let plane = h * w;
    let pad = k / 2;
    let chunk = c_in * k * k;
    for_each_plane(dwgt, chunk, plane * c_in * k * k, |co, dw| {
        let g_plane = &gout[co * plane..(co + 1) * plane];
        for ci in 0..c_in {
            let in_plane = &inp[ci * plane..(ci + 1) * plane];
            for ky in 0..k {
                let y0 = pad.saturating_sub(ky);
                let y1 = (h + pad).saturating_sub(ky).min(h);
                for kx in 0..k {
                    let x0 = pad.saturating_sub(kx);
                    let x1 = (w + pad).saturating_sub(kx).min(w);
                    if x1 <= x0 {
                        continue;
                    }
                    let mut acc = S::zero();
                    for y in y0..y1 {
                        let iy = y + ky - pad;
                        let ix0 = x0 + kx - pad;
                        acc = acc
                            + dot(
                                &g_plane[y * w + x0..y * w + x1],
                                &in_plane[iy * w + ix0..iy * w + ix0 + (x1 - x0)],
                            );
                    }
                    let wi = (ci * k + ky) * k + kx;
                    dw[wi] = dw[wi] + acc;
                }
            }
        }
    });
}

/// Gradient w.r.t. the convolution bias, accumulated into `dbias`.
pub(crate) fn conv2d_bwd_bias<S: Scalar>(gout: &[S], c_out: usize, plane: usize, dbias: &mut [S]) {
    for co in 0..c_out {
        dbias[co] = dbias[co] + sum(&gout[co * plane..(co + 1) * plane]);
    }
}

/// 1-D same-padding cross-correlation over `[C, L]` rows.
pub(crate) fn conv1d_fwd<S: Scalar>(
    inp: &[S],
    c_in: usize,
    l: usize,
    wgt: &[S],
    c_out: usize,
    k: usize,
    bias: &[S],
    out: &mut [S],
) {
    let pad = k / 2;
    for co in 0..c_out {
        let out_row = &mut out[co * l..(co + 1) * l];
        out_row.fill(bias[co]);
        for ci in 0..c_in {
            let taps = &wgt[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            corr_row_acc(out_row, &inp[ci * l..(ci + 1) * l], taps, pad);
        }
    }
}

pub(crate) fn conv1d_bwd_input<S: Scalar>(
    gout: &[S],
    c_out: usize,
    l: usize,
    wgt: &[S],
    c_in: usize,
    k: usize,
    dinp: &mut [S],
) {
    let pad = k / 2;
    assert!(k <= MAX_K);
    for ci in 0..c_in {
        let din_row = &mut dinp[ci * l..(ci + 1) * l];
        for co in 0..c_out {
            let src = &wgt[(co * c_in + ci) * k..(co * c_in + ci + 1) * k];
            let mut taps = [S::zero(); MAX_K];
            for i in 0..k {
                taps[i] = src[k - 1 - i];
            }
            corr_row_acc(din_row, &gout[co * l..(co + 1) * l], &taps[..k], pad);
        }
    }
}

pub(crate) fn conv1d_bwd_weight<S: Scalar>(
    gout: &[S],
    c_out: usize,
    l: usize,
    inp: &[S],
    c_in: usize,
    k: usize,
    dwgt: &mut [S],
) {
    let pad = k / 2;
    for co in 0..c_out {
        let g_row = &gout[co * l..(co + 1) * l];
        for ci in 0..c_in {
            let in_row = &inp[ci * l..(ci + 1) * l];
            for kx in 0..k {
                let x0 = pad.saturating_sub(kx);
                let x1 = (l + pad).saturating_sub(kx).min(l);
                if x1 <= x0 {
                    continue;
                }
                let ix0 = x0 + kx - pad;
                let wi = (co * c_in + ci) * k + kx;
                dwgt[wi] = dwgt[wi] + dot(&g_row[x0..x1], &in_row[ix0..ix0 + (x1 - x0)]);
            }
        }
    }
}

pub(crate) fn conv1d_bwd_bias<S: Scalar>(gout: &[S], c_out: usize, l: usize, dbias: &mut [S]) {
    for co in 0..c_out {
        dbias[co] = dbias[co] + sum(&gout[co * l..(co + 1) * l]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn corr_row_matches_hand_sums() {
        // [1,2,3,4] ⋆ [1,1,1] with zero padding → [3,6,9,7]
        let inp = [1.0f64, 2.0, 3.0, 4.0];
        let mut out = [0.0f64; 4];
        corr_row_acc(&mut out, &inp, &[1.0, 1.0, 1.0], 1);
        assert_eq!(out, [3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn corr_row_shorter_than_kernel() {
        let inp = [2.0f64, 5.0];
        let mut out = [0.0f64; 2];
        corr_row_acc(&mut out, &inp, &[1.0, 10.0, 100.0], 1);
        // x=0: 10·2 + 100·5 = 520 ; x=1: 1·2 + 10·5 = 52
        assert_eq!(out, [520.0, 52.0]);
    }

    #[test]
    fn conv2d_ones_kernel_counts_window() {
        let inp = vec![1.0f64; 9];
        let wgt = vec![1.0f64; 9];
        let mut out = vec![0.0f64; 9];
        conv2d_fwd(&inp, 1, 3, 3, &wgt, 1, 3, &[0.0], &mut out);
        assert_eq!(out[4], 9.0); // center
        assert_eq!(out[0], 4.0); // corner
        assert_eq!(out[1], 6.0); // edge
    }

    #[test]
    fn dot_and_sum_are_exact_on_integers() {
        let a: vec::Vec<f64> = (0..100).map(|i| i as f64).collect();
        let b: vec::Vec<f64> = (0..100).map(|i| (i % 7) as f64).collect();
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), expect);
        assert_eq!(sum(&a), 4950.0);
    }
}
