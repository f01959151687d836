//! Direct 2-d convolution kernels (forward, input-grad, weight-grad).
//!
//! The inner loops accumulate `out_row[x] += w * in_row[x + dx]` over
//! contiguous slices so the compiler can vectorize the stride-1 case. Work is
//! split across worker threads by batch sample; outputs are disjoint
//! per-sample slices and weight-gradient partials are reduced in sample
//! order, so results are bit-identical for any worker count.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static WORKERS: AtomicUsize = AtomicUsize::new(1);

/// Set the number of worker threads used inside convolution kernels.
/// Results do not depend on this value; it only affects wall-clock time.
pub fn set_workers(n: usize) {
    WORKERS.store(n.max(1), Ordering::Relaxed);
}

pub(crate) fn workers() -> usize {
    WORKERS.load(Ordering::Relaxed)
}

/// Run `f(sample_index, sample_chunk)` over `out` split into equal chunks of
/// `per` elements, using up to the configured worker count.
pub(crate) fn for_each_sample_mut<T, F>(out: &mut [T], per: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert_eq!(out.len() % per.max(1), 0);
    let n = if per == 0 { 0 } else { out.len() / per };
    let w = workers().min(n).max(1);
    if w <= 1 {
        for (i, chunk) in out.chunks_mut(per).enumerate() {
            f(i, chunk);
        }
        return;
    }
    let base = n / w;
    let extra = n % w;
    std::thread::scope(|scope| {
        let mut rest = out;
        let mut start = 0usize;
        for wi in 0..w {
            let count = base + usize::from(wi < extra);
            let (chunk, tail) = rest.split_at_mut(count * per);
            rest = tail;
            let fr = &f;
            scope.spawn(move || {
                for j in 0..count {
                    fr(start + j, &mut chunk[j * per..(j + 1) * per]);
                }
            });
            start += count;
        }
    });
}

/// Valid output range along one axis: returns `lo..hi` such that
/// `0 <= o*stride + offset - padding < len_in` for all `o` in the range.
fn out_range(len_in: usize, len_out: usize, offset: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if padding > offset {
        (padding - offset).div_ceil(stride)
    } else {
        0
    };
    if len_in + padding <= offset {
        return (lo, lo);
    }
    let hi = ((len_in - 1 + padding - offset) / stride + 1).min(len_out);
    (lo, hi.max(lo))
}

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

fn fwd_sample<T: Scalar>(x: &[T], weight: &[T], bias: &[T], d: &ConvDims, out: &mut [T]) {
    let (h, w, k, s, p, oh, ow) = (d.h, d.w, d.k, d.stride, d.padding, d.oh, d.ow);
    for ko in 0..d.k_out {
        let out_k = &mut out[ko * oh * ow..(ko + 1) * oh * ow];
        out_k.fill(bias[ko]);
        for ci in 0..d.c {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            let w_kc = &weight[(ko * d.c + ci) * k * k..(ko * d.c + ci + 1) * k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = out_range(h, oh, ky, s, p);
                for kx in 0..k {
                    let wv = w_kc[ky * k + kx];
                    let (ox_lo, ox_hi) = out_range(w, ow, kx, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let x_row = &x_c[iy * w..(iy + 1) * w];
                        let o_row = &mut out_k[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            let src = &x_row[ix0..ix0 + (ox_hi - ox_lo)];
                            for (dst, &sv) in o_row[ox_lo..ox_hi].iter_mut().zip(src) {
                                *dst += sv * wv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                o_row[ox] += x_row[ox * s + kx - p] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn input_grad_sample<T: Scalar>(gy: &[T], weight: &[T], d: &ConvDims, gx: &mut [T]) {
    let (h, w, k, s, p, oh, ow) = (d.h, d.w, d.k, d.stride, d.padding, d.oh, d.ow);
    gx.fill(T::zero());
    for ko in 0..d.k_out {
        let gy_k = &gy[ko * oh * ow..(ko + 1) * oh * ow];
        for ci in 0..d.c {
            let gx_c = &mut gx[ci * h * w..(ci + 1) * h * w];
            let w_kc = &weight[(ko * d.c + ci) * k * k..(ko * d.c + ci + 1) * k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = out_range(h, oh, ky, s, p);
                for kx in 0..k {
                    let wv = w_kc[ky * k + kx];
                    let (ox_lo, ox_hi) = out_range(w, ow, kx, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let gx_row = &mut gx_c[iy * w..(iy + 1) * w];
                        let gy_row = &gy_k[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            for (dst, &gv) in gx_row[ix0..ix0 + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&gy_row[ox_lo..ox_hi])
                            {
                                *dst += gv * wv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                gx_row[ox * s + kx - p] += gy_row[ox] * wv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn weight_grad_sample<T: Scalar>(x: &[T], gy: &[T], d: &ConvDims, gw: &mut [T]) {
    let (h, w, k, s, p, oh, ow) = (d.h, d.w, d.k, d.stride, d.padding, d.oh, d.ow);
    gw.fill(T::zero());
    for ko in 0..d.k_out {
        let gy_k = &gy[ko * oh * ow..(ko + 1) * oh * ow];
        for ci in 0..d.c {
            let x_c = &x[ci * h * w..(ci + 1) * h * w];
            let gw_kc = &mut gw[(ko * d.c + ci) * k * k..(ko * d.c + ci + 1) * k * k];
            for ky in 0..k {
                let (oy_lo, oy_hi) = out_range(h, oh, ky, s, p);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = out_range(w, ow, kx, s, p);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = T::zero();
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let x_row = &x_c[iy * w..(iy + 1) * w];
                        let gy_row = &gy_k[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = ox_lo + kx - p;
                            for (&gv, &sv) in gy_row[ox_lo..ox_hi]
                                .iter()
                                .zip(&x_row[ix0..ix0 + (ox_hi - ox_lo)])
                            {
                                acc += gv * sv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                acc += gy_row[ox] * x_row[ox * s + kx - p];
                            }
                        }
                    }
                    gw_kc[ky * k + kx] += acc;
                }
            }
        }
    }
}

/// 2-d convolution with square odd kernels.
///
/// `input` is [N,C,H,W], `weight` is [K,C,k,k], `bias` is [K]. Output spatial
/// size is `(H + 2*padding - k) / stride + 1`. Gradients are defined with
/// respect to all three tensor arguments.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = input.dims4("conv2d")?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: ws.to_vec(),
            reason: "weight must be [K,C,k,k] with a square kernel".into(),
        });
    }
    let (k_out, wc, k) = (ws[0], ws[1], ws[2]);
    if wc != c {
        return Err(Error::DimMismatch {
            op: "conv2d",
            axis: 1,
            left: c,
            right: wc,
        });
    }
    if k % 2 == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            reason: format!("kernel size {k} must be odd"),
        });
    }
    if bias.shape() != [k_out] {
        return Err(Error::DimMismatch {
            op: "conv2d",
            axis: 0,
            left: k_out,
            right: bias.numel(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument {
            op: "conv2d",
            reason: "stride must be >= 1".into(),
        });
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: input.shape().to_vec(),
            reason: format!("spatial size {h}x{w} too small for kernel {k} at padding {padding}"),
        });
    }
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let dims = ConvDims {
        n,
        c,
        h,
        w,
        k_out,
        k,
        stride,
        padding,
        oh,
        ow,
    };

    let mut out = vec![T::zero(); n * k_out * oh * ow];
    {
        let x = input.data();
        let wt = weight.data();
        let b = bias.data();
        let per = k_out * oh * ow;
        for_each_sample_mut(&mut out, per, |i, chunk| {
            fwd_sample(&x[i * c * h * w..(i + 1) * c * h * w], wt, b, &dims, chunk);
        });
    }

    let parents = vec![input.clone(), weight.clone(), bias.clone()];
    let (xt, wt) = (input.clone(), weight.clone());
    let (need_x, need_w, need_b) = (
        input.is_requires_grad(),
        weight.is_requires_grad(),
        bias.is_requires_grad(),
    );
    let backward = move |gy: &[T]| -> Vec<Option<Vec<T>>> {
        let d = &dims;
        let gx = need_x.then(|| {
            let mut gx = vec![T::zero(); d.n * d.c * d.h * d.w];
            let per_out = d.k_out * d.oh * d.ow;
            let per_in = d.c * d.h * d.w;
            let wd = wt.data();
            for_each_sample_mut(&mut gx, per_in, |i, chunk| {
                input_grad_sample(&gy[i * per_out..(i + 1) * per_out], wd, d, chunk);
            });
            gx
        });
        let gw = need_w.then(|| {
            let wlen = d.k_out * d.c * d.k * d.k;
            let mut partials = vec![T::zero(); d.n * wlen];
            let per_out = d.k_out * d.oh * d.ow;
            let per_in = d.c * d.h * d.w;
            let xd = xt.data();
            for_each_sample_mut(&mut partials, wlen, |i, chunk| {
                weight_grad_sample(
                    &xd[i * per_in..(i + 1) * per_in],
                    &gy[i * per_out..(i + 1) * per_out],
                    d,
                    chunk,
                );
            });
            // Reduce partials in sample order: deterministic for any worker count.
            let mut gw = vec![T::zero(); wlen];
            for i in 0..d.n {
                for (acc, &v) in gw.iter_mut().zip(&partials[i * wlen..(i + 1) * wlen]) {
                    *acc += v;
                }
            }
            gw
        });
        let gb = need_b.then(|| {
            let mut gb = vec![T::zero(); d.k_out];
            let plane = d.oh * d.ow;
            for i in 0..d.n {
                for ko in 0..d.k_out {
                    let base = (i * d.k_out + ko) * plane;
                    let mut acc = T::zero();
                    for &g in &gy[base..base + plane] {
                        acc += g;
                    }
                    gb[ko] += acc;
                }
            }
            gb
        });
        vec![gx, gw, gb]
    };

    Ok(Tensor::from_op(
        vec![n, k_out, oh, ow],
        out,
        parents,
        Box::new(backward),
    ))
}
