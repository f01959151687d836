//! Forward operations with reverse-mode gradients.

use std::cell::RefCell;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub use super::conv::conv2d;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        for (axis, (l, r)) in a.shape().iter().zip(b.shape()).enumerate() {
            if l != r {
                return Err(Error::DimMismatch {
                    op,
                    axis,
                    left: *l,
                    right: *r,
                });
            }
        }
        return Err(Error::BadShape {
            op,
            shape: b.shape().to_vec(),
            reason: format!("rank differs from {:?}", a.shape()),
        });
    }
    Ok(())
}

/// Elementwise sum of two same-shape tensors.
pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let (na, nb) = (a.is_requires_grad(), b.is_requires_grad());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| g.to_vec()),
                nb.then(|| g.to_vec()),
            ]
        }),
    ))
}

/// Elementwise product of two same-shape tensors.
pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let (na, nb) = (a.is_requires_grad(), b.is_requires_grad());
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![
                na.then(|| g.iter().zip(bc.data()).map(|(&gv, &y)| gv * y).collect()),
                nb.then(|| g.iter().zip(ac.data()).map(|(&gv, &x)| gv * x).collect()),
            ]
        }),
    ))
}

/// Multiply by a compile-time constant scalar (not a graph node).
pub fn scale<T: Scalar>(x: &Tensor<T>, c: f64) -> Tensor<T> {
    let cv = T::from_f64(c);
    let data = x.data().iter().map(|&v| v * cv).collect();
    let need = x.is_requires_grad();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| vec![need.then(|| g.iter().map(|&gv| gv * cv).collect())]),
    )
}

/// Sum of all elements to a scalar.
pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut acc = T::zero();
    for &v in x.data() {
        acc += v;
    }
    let need = x.is_requires_grad();
    let n = x.numel();
    Tensor::from_op(
        vec![],
        vec![acc],
        vec![x.clone()],
        Box::new(move |g| vec![need.then(|| vec![g[0]; n])]),
    )
}

/// Matrix product [N,D] x [D,E] -> [N,E].
pub fn matmul<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("matmul")?;
    let (wd, e) = w.dims2("matmul")?;
    if d != wd {
        return Err(Error::DimMismatch {
            op: "matmul",
            axis: 0,
            left: d,
            right: wd,
        });
    }
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); n * e];
    for i in 0..n {
        let out_row = &mut out[i * e..(i + 1) * e];
        for j in 0..d {
            let a = xd[i * d + j];
            if a == T::zero() {
                continue;
            }
            let w_row = &wdat[j * e..(j + 1) * e];
            for (o, &wv) in out_row.iter_mut().zip(w_row) {
                *o += a * wv;
            }
        }
    }
    let (nx, nw) = (x.is_requires_grad(), w.is_requires_grad());
    let (xc, wc) = (x.clone(), w.clone());
    Ok(Tensor::from_op(
        vec![n, e],
        out,
        vec![x.clone(), w.clone()],
        Box::new(move |g| {
            let gx = nx.then(|| {
                // dX = dY . W^T
                let wd2 = wc.data();
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let g_row = &g[i * e..(i + 1) * e];
                    let gx_row = &mut gx[i * d..(i + 1) * d];
                    for j in 0..d {
                        let w_row = &wd2[j * e..(j + 1) * e];
                        let mut acc = T::zero();
                        for (&gv, &wv) in g_row.iter().zip(w_row) {
                            acc += gv * wv;
                        }
                        gx_row[j] = acc;
                    }
                }
                gx
            });
            let gw = nw.then(|| {
                // dW = X^T . dY, accumulated in sample order.
                let xd2 = xc.data();
                let mut gw = vec![T::zero(); d * e];
                for i in 0..n {
                    let g_row = &g[i * e..(i + 1) * e];
                    for j in 0..d {
                        let a = xd2[i * d + j];
                        if a == T::zero() {
                            continue;
                        }
                        let gw_row = &mut gw[j * e..(j + 1) * e];
                        for (o, &gv) in gw_row.iter_mut().zip(g_row) {
                            *o += a * gv;
                        }
                    }
                }
                gw
            });
            vec![gx, gw]
        }),
    ))
}

/// Broadcast-add a bias row: [N,E] + [E].
pub fn add_bias<T: Scalar>(x: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, e) = x.dims2("add_bias")?;
    if b.shape() != [e] {
        return Err(Error::DimMismatch {
            op: "add_bias",
            axis: 1,
            left: e,
            right: b.numel(),
        });
    }
    let bd = b.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v + bd[i % e])
        .collect();
    let (nx, nb) = (x.is_requires_grad(), b.is_requires_grad());
    Ok(Tensor::from_op(
        vec![n, e],
        data,
        vec![x.clone(), b.clone()],
        Box::new(move |g| {
            let gx = nx.then(|| g.to_vec());
            let gb = nb.then(|| {
                let mut gb = vec![T::zero(); e];
                for i in 0..n {
                    for (acc, &gv) in gb.iter_mut().zip(&g[i * e..(i + 1) * e]) {
                        *acc += gv;
                    }
                }
                gb
            });
            vec![gx, gb]
        }),
    ))
}

/// Affine map y = xW + b.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    add_bias(&matmul(x, w)?, b)
}

/// Mean over the spatial extent: [N,C,H,W] -> [N,C].
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    if h == 0 || w == 0 {
        return Err(Error::BadShape {
            op: "global_avg_pool",
            shape: x.shape().to_vec(),
            reason: "spatial dims must be >= 1".into(),
        });
    }
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); n * c];
    for i in 0..n * c {
        let mut acc = T::zero();
        for &v in &xd[i * plane..(i + 1) * plane] {
            acc += v;
        }
        out[i] = acc * inv;
    }
    let need = x.is_requires_grad();
    Ok(Tensor::from_op(
        vec![n, c],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                let mut gx = vec![T::zero(); n * c * plane];
                for i in 0..n * c {
                    let gv = g[i] * inv;
                    gx[i * plane..(i + 1) * plane].fill(gv);
                }
                gx
            })]
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// max(0, x); the gradient at exactly 0 is defined as 0.
pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let need = x.is_requires_grad();
    let xc = x.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                g.iter()
                    .zip(xc.data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect()
            })]
        }),
    )
}

/// Logistic sigmoid, output strictly in (0,1) for finite input. Deep tails
/// are clamped one representable step inside the interval so the strict
/// bound survives rounding.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let hi = T::one() - T::epsilon();
    let lo = T::min_positive_value();
    let data: Vec<T> = x
        .data()
        .iter()
        .map(|&v| {
            // Stable in both tails.
            let y = if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            };
            y.max(lo).min(hi)
        })
        .collect();
    let need = x.is_requires_grad();
    let y = data.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                g.iter()
                    .zip(&y)
                    .map(|(&gv, &yv)| gv * yv * (T::one() - yv))
                    .collect()
            })]
        }),
    )
}

pub fn activation<T: Scalar>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => relu(x),
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Per-row Euclidean norm: [N,D] -> [N]. The gradient at an exactly zero row
/// is defined as 0.
pub fn l2_norm_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("l2_norm_rows")?;
    let xd = x.data();
    let mut out = vec![T::zero(); n];
    for i in 0..n {
        let mut acc = T::zero();
        for &v in &xd[i * d..(i + 1) * d] {
            acc += v * v;
        }
        out[i] = acc.sqrt();
    }
    let need = x.is_requires_grad();
    let xc = x.clone();
    let norms = out.clone();
    Ok(Tensor::from_op(
        vec![n],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                let xd2 = xc.data();
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    if norms[i] == T::zero() {
                        continue;
                    }
                    let s = g[i] / norms[i];
                    for (gv, &xv) in gx[i * d..(i + 1) * d].iter_mut().zip(&xd2[i * d..(i + 1) * d])
                    {
                        *gv = xv * s;
                    }
                }
                gx
            })]
        }),
    ))
}

/// Rows scaled to unit Euclidean norm. Errors on an exactly zero row.
pub fn l2_normalize_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("l2_normalize_rows")?;
    let xd = x.data();
    let mut norms = vec![T::zero(); n];
    for i in 0..n {
        let mut acc = T::zero();
        for &v in &xd[i * d..(i + 1) * d] {
            acc += v * v;
        }
        let r = acc.sqrt();
        if r == T::zero() {
            return Err(Error::ZeroNormRow {
                op: "l2_normalize_rows",
                row: i,
            });
        }
        norms[i] = r;
    }
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let inv = T::one() / norms[i];
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(&xd[i * d..(i + 1) * d]) {
            *o = v * inv;
        }
    }
    let need = x.is_requires_grad();
    let y = out.clone();
    Ok(Tensor::from_op(
        vec![n, d],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                // dx = (g - y * <g, y>) / r per row
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let yr = &y[i * d..(i + 1) * d];
                    let gr = &g[i * d..(i + 1) * d];
                    let mut dot = T::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        dot += gv * yv;
                    }
                    let inv = T::one() / norms[i];
                    for ((o, &gv), &yv) in gx[i * d..(i + 1) * d].iter_mut().zip(gr).zip(yr) {
                        *o = (gv - yv * dot) * inv;
                    }
                }
                gx
            })]
        }),
    ))
}

/// Columns scaled to unit Euclidean norm. Errors on an exactly zero column.
pub fn l2_normalize_cols<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (d, k) = x.dims2("l2_normalize_cols")?;
    let xd = x.data();
    let mut norms = vec![T::zero(); k];
    for j in 0..k {
        let mut acc = T::zero();
        for i in 0..d {
            let v = xd[i * k + j];
            acc += v * v;
        }
        let r = acc.sqrt();
        if r == T::zero() {
            return Err(Error::ZeroNormRow {
                op: "l2_normalize_cols",
                row: j,
            });
        }
        norms[j] = r;
    }
    let mut out = vec![T::zero(); d * k];
    for i in 0..d {
        for j in 0..k {
            out[i * k + j] = xd[i * k + j] / norms[j];
        }
    }
    let need = x.is_requires_grad();
    let y = out.clone();
    Ok(Tensor::from_op(
        vec![d, k],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                let mut gx = vec![T::zero(); d * k];
                for j in 0..k {
                    let mut dot = T::zero();
                    for i in 0..d {
                        dot += g[i * k + j] * y[i * k + j];
                    }
                    let inv = T::one() / norms[j];
                    for i in 0..d {
                        gx[i * k + j] = (g[i * k + j] - y[i * k + j] * dot) * inv;
                    }
                }
                gx
            })]
        }),
    ))
}

/// Concatenate along `axis`; all other dimensions must agree.
pub fn concat<T: Scalar>(xs: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(Error::InvalidArgument {
            op: "concat",
            reason: "need at least one input".into(),
        });
    }
    let rank = xs[0].shape().len();
    if axis >= rank {
        return Err(Error::InvalidArgument {
            op: "concat",
            reason: format!("axis {axis} out of range for rank {rank}"),
        });
    }
    for x in &xs[1..] {
        if x.shape().len() != rank {
            return Err(Error::BadShape {
                op: "concat",
                shape: x.shape().to_vec(),
                reason: format!("rank differs from {:?}", xs[0].shape()),
            });
        }
        for a in 0..rank {
            if a != axis && x.shape()[a] != xs[0].shape()[a] {
                return Err(Error::DimMismatch {
                    op: "concat",
                    axis: a,
                    left: xs[0].shape()[a],
                    right: x.shape()[a],
                });
            }
        }
    }
    let outer: usize = xs[0].shape()[..axis].iter().product();
    let inner: usize = xs[0].shape()[axis + 1..].iter().product();
    let axis_lens: Vec<usize> = xs.iter().map(|x| x.shape()[axis]).collect();
    let total_axis: usize = axis_lens.iter().sum();

    let mut shape = xs[0].shape().to_vec();
    shape[axis] = total_axis;
    let mut out = vec![T::zero(); outer * total_axis * inner];
    let mut offset = 0;
    for (x, &alen) in xs.iter().zip(&axis_lens) {
        let xd = x.data();
        for o in 0..outer {
            let src = &xd[o * alen * inner..(o + 1) * alen * inner];
            let dst_base = (o * total_axis + offset) * inner;
            out[dst_base..dst_base + alen * inner].copy_from_slice(src);
        }
        offset += alen;
    }
    let needs: Vec<bool> = xs.iter().map(|x| x.is_requires_grad()).collect();
    let lens = axis_lens.clone();
    Ok(Tensor::from_op(
        shape,
        out,
        xs.to_vec(),
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(lens.len());
            let mut off = 0;
            for (idx, &alen) in lens.iter().enumerate() {
                if needs[idx] {
                    let mut gx = vec![T::zero(); outer * alen * inner];
                    for o in 0..outer {
                        let src_base = (o * total_axis + off) * inner;
                        gx[o * alen * inner..(o + 1) * alen * inner]
                            .copy_from_slice(&g[src_base..src_base + alen * inner]);
                    }
                    grads.push(Some(gx));
                } else {
                    grads.push(None);
                }
                off += alen;
            }
            grads
        }),
    ))
}

/// View with a new shape over the same number of elements.
pub fn reshape<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() {
        return Err(Error::BadShape {
            op: "reshape",
            shape: shape.to_vec(),
            reason: format!("cannot view {} elements as {:?}", x.numel(), shape),
        });
    }
    let need = x.is_requires_grad();
    Ok(Tensor::from_op(
        shape.to_vec(),
        x.data().to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![need.then(|| g.to_vec())]),
    ))
}

/// Collapse all trailing dims: [N, ...] -> [N, prod].
pub fn flatten<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().is_empty() {
        return Err(Error::BadShape {
            op: "flatten",
            shape: vec![],
            reason: "scalar has no batch dim".into(),
        });
    }
    let n = x.shape()[0];
    let rest: usize = x.shape()[1..].iter().product();
    reshape(x, &[n, rest])
}

/// Scale each row of [N,D] by a fixed per-sample coefficient (not a graph
/// node; used where attention weights are treated as constants).
pub fn mul_rows_const<T: Scalar>(x: &Tensor<T>, coef: &[T]) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("mul_rows_const")?;
    if coef.len() != n {
        return Err(Error::DimMismatch {
            op: "mul_rows_const",
            axis: 0,
            left: n,
            right: coef.len(),
        });
    }
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let c = coef[i];
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(&x.data()[i * d..(i + 1) * d]) {
            *o = v * c;
        }
    }
    let need = x.is_requires_grad();
    let coefs = coef.to_vec();
    Ok(Tensor::from_op(
        vec![n, d],
        out,
        vec![x.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                let mut gx = vec![T::zero(); n * d];
                for i in 0..n {
                    let c = coefs[i];
                    for (o, &gv) in gx[i * d..(i + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *o = gv * c;
                    }
                }
                gx
            })]
        }),
    ))
}

/// Multiply a feature map by a single-channel spatial gate, broadcast over
/// channels: [N,C,H,W] * [N,1,H,W].
pub fn mul_spatial_gate<T: Scalar>(fmap: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = fmap.dims4("mul_spatial_gate")?;
    let (gn, gc, gh, gw) = gate.dims4("mul_spatial_gate")?;
    if gn != n || gh != h || gw != w {
        return Err(Error::BadShape {
            op: "mul_spatial_gate",
            shape: gate.shape().to_vec(),
            reason: format!("gate must be [{n},1,{h},{w}]"),
        });
    }
    if gc != 1 {
        return Err(Error::DimMismatch {
            op: "mul_spatial_gate",
            axis: 1,
            left: 1,
            right: gc,
        });
    }
    let plane = h * w;
    let fd = fmap.data();
    let gd = gate.data();
    let mut out = vec![T::zero(); n * c * plane];
    for i in 0..n {
        let g_plane = &gd[i * plane..(i + 1) * plane];
        for ci in 0..c {
            let base = (i * c + ci) * plane;
            for (x, (&fv, &gv)) in out[base..base + plane]
                .iter_mut()
                .zip(fd[base..base + plane].iter().zip(g_plane))
            {
                *x = fv * gv;
            }
        }
    }
    let (nf, ng) = (fmap.is_requires_grad(), gate.is_requires_grad());
    let (fc, gc2) = (fmap.clone(), gate.clone());
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![fmap.clone(), gate.clone()],
        Box::new(move |g| {
            let gf = nf.then(|| {
                let gd2 = gc2.data();
                let mut gx = vec![T::zero(); n * c * plane];
                for i in 0..n {
                    let g_plane = &gd2[i * plane..(i + 1) * plane];
                    for ci in 0..c {
                        let base = (i * c + ci) * plane;
                        for (o, (&gv, &gate_v)) in gx[base..base + plane]
                            .iter_mut()
                            .zip(g[base..base + plane].iter().zip(g_plane))
                        {
                            *o = gv * gate_v;
                        }
                    }
                }
                gx
            });
            let gg = ng.then(|| {
                let fd2 = fc.data();
                let mut gg = vec![T::zero(); n * plane];
                for i in 0..n {
                    let acc = &mut gg[i * plane..(i + 1) * plane];
                    for ci in 0..c {
                        let base = (i * c + ci) * plane;
                        for (o, (&gv, &fv)) in acc
                            .iter_mut()
                            .zip(g[base..base + plane].iter().zip(&fd2[base..base + plane]))
                        {
                            *o += gv * fv;
                        }
                    }
                }
                gg
            });
            vec![gf, gg]
        }),
    ))
}

/// Multiply a feature map by per-channel gates, broadcast over space:
/// [N,C,H,W] * [N,C].
pub fn mul_channel_gate<T: Scalar>(fmap: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = fmap.dims4("mul_channel_gate")?;
    let (gn, gc) = gate.dims2("mul_channel_gate")?;
    if gn != n || gc != c {
        return Err(Error::BadShape {
            op: "mul_channel_gate",
            shape: gate.shape().to_vec(),
            reason: format!("gate must be [{n},{c}]"),
        });
    }
    let plane = h * w;
    let fd = fmap.data();
    let gd = gate.data();
    let mut out = vec![T::zero(); n * c * plane];
    for i in 0..n * c {
        let gv = gd[i];
        for (o, &fv) in out[i * plane..(i + 1) * plane]
            .iter_mut()
            .zip(&fd[i * plane..(i + 1) * plane])
        {
            *o = fv * gv;
        }
    }
    let (nf, ng) = (fmap.is_requires_grad(), gate.is_requires_grad());
    let (fc, gcl) = (fmap.clone(), gate.clone());
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![fmap.clone(), gate.clone()],
        Box::new(move |g| {
            let gf = nf.then(|| {
                let gd2 = gcl.data();
                let mut gx = vec![T::zero(); n * c * plane];
                for i in 0..n * c {
                    let gv = gd2[i];
                    for (o, &up) in gx[i * plane..(i + 1) * plane]
                        .iter_mut()
                        .zip(&g[i * plane..(i + 1) * plane])
                    {
                        *o = up * gv;
                    }
                }
                gx
            });
            let gg = ng.then(|| {
                let fd2 = fc.data();
                let mut gg = vec![T::zero(); n * c];
                for i in 0..n * c {
                    let mut acc = T::zero();
                    for (&up, &fv) in g[i * plane..(i + 1) * plane]
                        .iter()
                        .zip(&fd2[i * plane..(i + 1) * plane])
                    {
                        acc += up * fv;
                    }
                    gg[i] = acc;
                }
                gg
            });
            vec![gf, gg]
        }),
    ))
}

/// Running statistics for batch normalization, kept in f64 regardless of the
/// tensor element type.
#[derive(Debug)]
pub struct BatchNormState {
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            running_mean: RefCell::new(vec![0.0; dim]),
            running_var: RefCell::new(vec![1.0; dim]),
            momentum,
            eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch normalization over [N,D] with affine parameters.
///
/// Training mode normalizes by batch statistics (population variance) and
/// folds them into the running estimates; eval mode uses the running
/// estimates and never mutates state. N must be >= 2 in training mode.
pub fn batch_norm_1d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("batch_norm_1d")?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(Error::BadShape {
            op: "batch_norm_1d",
            shape: gamma.shape().to_vec(),
            reason: format!("affine params must be [{d}]"),
        });
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::BatchTooSmall {
            op: "batch_norm_1d",
            n,
            min: 2,
        });
    }
    let xd = x.data();
    let eps = state.eps;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; d];
            let mut var = vec![0.0f64; d];
            for i in 0..n {
                for j in 0..d {
                    mean[j] += xd[i * d + j].as_f64();
                }
            }
            for m in mean.iter_mut() {
                *m /= n as f64;
            }
            for i in 0..n {
                for j in 0..d {
                    let diff = xd[i * d + j].as_f64() - mean[j];
                    var[j] += diff * diff;
                }
            }
            for v in var.iter_mut() {
                *v /= n as f64;
            }
            {
                let mut rm = state.running_mean.borrow_mut();
                let mut rv = state.running_var.borrow_mut();
                let mom = state.momentum;
                for j in 0..d {
                    rm[j] = (1.0 - mom) * rm[j] + mom * mean[j];
                    rv[j] = (1.0 - mom) * rv[j] + mom * var[j];
                }
            }
            (mean, var)
        }
        Mode::Eval => (
            state.running_mean.borrow().clone(),
            state.running_var.borrow().clone(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); n * d];
    let mut out = vec![T::zero(); n * d];
    let gd = gamma.data();
    let bd = beta.data();
    for i in 0..n {
        for j in 0..d {
            let xh = (xd[i * d + j].as_f64() - mean[j]) * inv_std[j];
            xhat[i * d + j] = T::from_f64(xh);
            out[i * d + j] = gd[j] * xhat[i * d + j] + bd[j];
        }
    }

    let (nx, ng, nb) = (
        x.is_requires_grad(),
        gamma.is_requires_grad(),
        beta.is_requires_grad(),
    );
    let gamma_c = gamma.clone();
    let train = mode == Mode::Train;
    Ok(Tensor::from_op(
        vec![n, d],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gx = nx.then(|| {
                let gd2 = gamma_c.data();
                let mut gx = vec![T::zero(); n * d];
                if train {
                    // Full backward through the batch statistics.
                    for j in 0..d {
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for i in 0..n {
                            let gv = g[i * d + j].as_f64();
                            sum_g += gv;
                            sum_gx += gv * xhat[i * d + j].as_f64();
                        }
                        let coef = gd2[j].as_f64() * inv_std[j] / n as f64;
                        for i in 0..n {
                            let gv = g[i * d + j].as_f64();
                            let xh = xhat[i * d + j].as_f64();
                            gx[i * d + j] =
                                T::from_f64(coef * (n as f64 * gv - sum_g - xh * sum_gx));
                        }
                    }
                } else {
                    for j in 0..d {
                        let s = T::from_f64(gd2[j].as_f64() * inv_std[j]);
                        for i in 0..n {
                            gx[i * d + j] = g[i * d + j] * s;
                        }
                    }
                }
                gx
            });
            let ggamma = ng.then(|| {
                let mut gg = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        gg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
                gg
            });
            let gbeta = nb.then(|| {
                let mut gb = vec![T::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        gb[j] += g[i * d + j];
                    }
                }
                gb
            });
            vec![gx, ggamma, gbeta]
        }),
    ))
}

/// Per-channel batch normalization over [N,C,H,W] feature maps; statistics
/// are taken over N, H and W.
pub fn batch_norm_2d<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    state: &BatchNormState,
    mode: Mode,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("batch_norm_2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::BadShape {
            op: "batch_norm_2d",
            shape: gamma.shape().to_vec(),
            reason: format!("affine params must be [{c}]"),
        });
    }
    if mode == Mode::Train && n < 2 {
        return Err(Error::BatchTooSmall {
            op: "batch_norm_2d",
            n,
            min: 2,
        });
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let xd = x.data();
    let eps = state.eps;

    let (mean, var) = match mode {
        Mode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for i in 0..n {
                for ci in 0..c {
                    let base = (i * c + ci) * plane;
                    let mut acc = 0.0;
                    for &v in &xd[base..base + plane] {
                        acc += v.as_f64();
                    }
                    mean[ci] += acc;
                }
            }
            for m in mean.iter_mut() {
                *m /= count;
            }
            for i in 0..n {
                for ci in 0..c {
                    let base = (i * c + ci) * plane;
                    let mut acc = 0.0;
                    for &v in &xd[base..base + plane] {
                        let diff = v.as_f64() - mean[ci];
                        acc += diff * diff;
                    }
                    var[ci] += acc;
                }
            }
            for v in var.iter_mut() {
                *v /= count;
            }
            {
                let mut rm = state.running_mean.borrow_mut();
                let mut rv = state.running_var.borrow_mut();
                let mom = state.momentum;
                for ci in 0..c {
                    rm[ci] = (1.0 - mom) * rm[ci] + mom * mean[ci];
                    rv[ci] = (1.0 - mom) * rv[ci] + mom * var[ci];
                }
            }
            (mean, var)
        }
        Mode::Eval => (
            state.running_mean.borrow().clone(),
            state.running_var.borrow().clone(),
        ),
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); n * c * plane];
    let mut out = vec![T::zero(); n * c * plane];
    let gd = gamma.data();
    let bd = beta.data();
    for i in 0..n {
        for ci in 0..c {
            let base = (i * c + ci) * plane;
            for off in 0..plane {
                let xh = (xd[base + off].as_f64() - mean[ci]) * inv_std[ci];
                xhat[base + off] = T::from_f64(xh);
                out[base + off] = gd[ci] * xhat[base + off] + bd[ci];
            }
        }
    }

    let (nx, ng, nb) = (
        x.is_requires_grad(),
        gamma.is_requires_grad(),
        beta.is_requires_grad(),
    );
    let gamma_c = gamma.clone();
    let train = mode == Mode::Train;
    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |g| {
            let gx = nx.then(|| {
                let gd2 = gamma_c.data();
                let mut gx = vec![T::zero(); n * c * plane];
                if train {
                    for ci in 0..c {
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for i in 0..n {
                            let base = (i * c + ci) * plane;
                            for off in 0..plane {
                                let gv = g[base + off].as_f64();
                                sum_g += gv;
                                sum_gx += gv * xhat[base + off].as_f64();
                            }
                        }
                        let coef = gd2[ci].as_f64() * inv_std[ci] / count;
                        for i in 0..n {
                            let base = (i * c + ci) * plane;
                            for off in 0..plane {
                                let gv = g[base + off].as_f64();
                                let xh = xhat[base + off].as_f64();
                                gx[base + off] =
                                    T::from_f64(coef * (count * gv - sum_g - xh * sum_gx));
                            }
                        }
                    }
                } else {
                    for ci in 0..c {
                        let s = T::from_f64(gd2[ci].as_f64() * inv_std[ci]);
                        for i in 0..n {
                            let base = (i * c + ci) * plane;
                            for off in 0..plane {
                                gx[base + off] = g[base + off] * s;
                            }
                        }
                    }
                }
                gx
            });
            let ggamma = ng.then(|| {
                let mut gg = vec![T::zero(); c];
                for i in 0..n {
                    for ci in 0..c {
                        let base = (i * c + ci) * plane;
                        for off in 0..plane {
                            gg[ci] += g[base + off] * xhat[base + off];
                        }
                    }
                }
                gg
            });
            let gbeta = nb.then(|| {
                let mut gb = vec![T::zero(); c];
                for i in 0..n {
                    for ci in 0..c {
                        let base = (i * c + ci) * plane;
                        for &gv in &g[base..base + plane] {
                            gb[ci] += gv;
                        }
                    }
                }
                gb
            });
            vec![gx, ggamma, gbeta]
        }),
    ))
}

/// Mean negative log-softmax of the target class, stabilized by max
/// subtraction. Labels must lie in [0, K).
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::DimMismatch {
            op: "softmax_cross_entropy",
            axis: 0,
            left: n,
            right: labels.len(),
        });
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::LabelOutOfRange {
                index: i,
                label: l,
                classes: k,
            });
        }
    }
    let ld = logits.data();
    let mut probs = vec![T::zero(); n * k];
    let mut loss = 0.0f64;
    for i in 0..n {
        let row = &ld[i * k..(i + 1) * k];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let mut z = 0.0f64;
        for &v in row {
            z += (v - mx).as_f64().exp();
        }
        let logz = z.ln();
        for (j, &v) in row.iter().enumerate() {
            probs[i * k + j] = T::from_f64(((v - mx).as_f64() - logz).exp());
        }
        loss -= (ld[i * k + labels[i]] - mx).as_f64() - logz;
    }
    loss /= n as f64;
    let need = logits.is_requires_grad();
    let labels_owned = labels.to_vec();
    Ok(Tensor::from_op(
        vec![],
        vec![T::from_f64(loss)],
        vec![logits.clone()],
        Box::new(move |g| {
            vec![need.then(|| {
                let scale = g[0] * T::from_f64(1.0 / n as f64);
                let mut gx = probs.clone();
                for (i, &l) in labels_owned.iter().enumerate() {
                    gx[i * k + l] -= T::one();
                }
                for v in gx.iter_mut() {
                    *v *= scale;
                }
                gx
            })]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn randn(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_cases() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = Tensor::from_vec(&[3, 3], eye).unwrap();
        let b = Tensor::zeros(&[3]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());

        let x0 = Tensor::zeros(&[2, 3]);
        let w2 = Tensor::from_vec(&[3, 2], vec![1.0; 6]).unwrap();
        let b2 = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let y2 = linear(&x0, &w2, &b2).unwrap();
        assert_eq!(y2.data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn matmul_matches_naive_loop_oracle() {
        let mut rng = RngStream::new(2);
        let x = randn(&mut rng, &[3, 4]);
        let w = randn(&mut rng, &[4, 2]);
        let y = matmul(&x, &w).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for kk in 0..4 {
                    acc += x.data()[i * 4 + kk] * w.data()[kk * 2 + j];
                }
                assert!((y.data()[i * 2 + j] - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let x = Tensor::<f64>::zeros(&[3, 4]);
        let w = Tensor::<f64>::zeros(&[5, 2]);
        assert!(matches!(
            matmul(&x, &w),
            Err(Error::DimMismatch { left: 4, right: 5, .. })
        ));
    }

    #[test]
    fn global_avg_pool_cases() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);

        let c = Tensor::full(&[2, 3, 4, 4], 7.25);
        assert!(global_avg_pool(&c)
            .unwrap()
            .data()
            .iter()
            .all(|&v| (v - 7.25f64).abs() < 1e-12));

        let one = Tensor::from_vec(&[1, 2, 1, 1], vec![3.0, -4.0]).unwrap();
        assert_eq!(global_avg_pool(&one).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn activation_scalar_examples() {
        let x = Tensor::from_vec(&[3], vec![0.0f64, -3.0, 2.0]).unwrap();
        let s = sigmoid(&x);
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[2] - 0.8807970779778823).abs() < 1e-12);
        let r = relu(&x);
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_output_strictly_inside_unit_interval() {
        let x = Tensor::from_vec(&[4], vec![-500.0, -30.0, 30.0, 500.0]).unwrap();
        for &v in sigmoid(&x).data() {
            assert!(v > 0.0 && v < 1.0, "sigmoid out of (0,1): {v}");
        }
    }

    #[test]
    fn l2_norm_rows_examples() {
        let x = Tensor::from_vec(&[3, 4], vec![
            3.0, 4.0, 0.0, 0.0, // norm 5
            0.0, 0.0, 0.0, 0.0, // norm 0
            1.0, 1.0, 1.0, 1.0, // norm 2
        ])
        .unwrap();
        let z = l2_norm_rows(&x).unwrap();
        assert_eq!(z.data(), &[5.0, 0.0, 2.0]);
    }

    #[test]
    fn l2_norm_zero_row_has_zero_gradient() {
        let x = Tensor::from_vec(&[1, 3], vec![0.0, 0.0, 0.0])
            .unwrap()
            .requires_grad();
        let z = sum_all(&l2_norm_rows(&x).unwrap());
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn concat_ordering_and_gradient_routing() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0; 6]).unwrap().requires_grad();
        let b = Tensor::from_vec(&[2, 3], vec![2.0; 6]).unwrap().requires_grad();
        let y = concat(&[a.clone(), b.clone()], 1).unwrap();
        assert_eq!(y.shape(), [2, 6]);
        assert_eq!(&y.data()[0..3], &[1.0; 3]);
        assert_eq!(&y.data()[3..6], &[2.0; 3]);

        // Single input behaves as identity.
        let single = concat(&[a.clone()], 1).unwrap();
        assert_eq!(single.data(), a.data());

        // Gradient slices route back to their sources.
        let ya = mul_rows_const(&y, &[1.0, 3.0]).unwrap();
        sum_all(&ya).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0, 1.0, 1.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn concat_slice_ordering_matches_inputs() {
        let mut rng = RngStream::new(9);
        let xs: Vec<Tensor<f64>> = (0..3).map(|_| randn(&mut rng, &[1, 2])).collect();
        let y = concat(&xs, 1).unwrap();
        for (i, x) in xs.iter().enumerate() {
            assert_eq!(&y.data()[i * 2..(i + 1) * 2], x.data());
        }
    }

    #[test]
    fn concat_rejects_mismatched_non_axis_dims() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 3]);
        assert!(matches!(
            concat(&[a, b], 1),
            Err(Error::DimMismatch { axis: 0, .. })
        ));
    }

    #[test]
    fn batch_norm_identity_on_standardized_batch() {
        // Batch already zero-mean unit-variance (population), affine identity.
        let x = Tensor::from_vec(&[2, 2], vec![1.0f64, -1.0, -1.0, 1.0]).unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let state = BatchNormState::new(2, 0.1, 1e-9);
        let y = batch_norm_1d(&x, &gamma, &beta, &state, Mode::Train).unwrap();
        for (a, e) in y.data().iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-5, "{a} vs {e}");
        }
    }

    #[test]
    fn batch_norm_constant_column_outputs_zero() {
        let x = Tensor::from_vec(&[3, 1], vec![5.0, 5.0, 5.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let state = BatchNormState::new(1, 0.1, 1e-5);
        let y = batch_norm_1d(&x, &gamma, &beta, &state, Mode::Train).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn batch_norm_standardizes_random_batch() {
        let mut rng = RngStream::new(4);
        let x = randn(&mut rng, &[64, 5]);
        let gamma = Tensor::full(&[5], 1.0);
        let beta = Tensor::zeros(&[5]);
        let state = BatchNormState::new(5, 0.1, 1e-8);
        let y = batch_norm_1d(&x, &gamma, &beta, &state, Mode::Train).unwrap();
        for j in 0..5 {
            let col: Vec<f64> = (0..64).map(|i| y.data()[i * 5 + j]).collect();
            let mean = col.iter().sum::<f64>() / 64.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-4, "col {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "col {j} var {var}");
        }
    }

    #[test]
    fn batch_norm_rejects_singleton_training_batch() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let gamma = Tensor::full(&[3], 1.0);
        let beta = Tensor::zeros(&[3]);
        let state = BatchNormState::new(3, 0.1, 1e-5);
        assert!(matches!(
            batch_norm_1d(&x, &gamma, &beta, &state, Mode::Train),
            Err(Error::BatchTooSmall { n: 1, .. })
        ));
        // Eval mode is fine with one sample.
        assert!(batch_norm_1d(&x, &gamma, &beta, &state, Mode::Eval).is_ok());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        for k in [2usize, 5, 20] {
            let logits = Tensor::full(&[3, k], 0.7);
            let loss = softmax_cross_entropy(&logits, &[0, k - 1, k / 2]).unwrap();
            assert!((loss.item() - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_saturated_target_approaches_zero() {
        let mut data = vec![0.0; 4];
        data[1] = 20.0;
        let logits = Tensor::from_vec(&[1, 4], data).unwrap();
        let loss = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(loss.item() < 1e-3);
    }

    #[test]
    fn cross_entropy_frozen_scalar_example() {
        let logits = Tensor::from_vec(&[1, 3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let loss = softmax_cross_entropy(&logits, &[2]).unwrap();
        assert!((loss.item() - 0.4076059644443804).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]),
            Err(Error::LabelOutOfRange { index: 1, label: 3, classes: 3 })
        ));
    }

    #[test]
    fn gate_broadcasts_agree_with_dense_mul() {
        let mut rng = RngStream::new(6);
        let f = randn(&mut rng, &[2, 3, 4, 4]);
        let g_plane = randn(&mut rng, &[2, 1, 4, 4]);
        let y = mul_spatial_gate(&f, &g_plane).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..16 {
                    let want = f.data()[(n * 3 + c) * 16 + p] * g_plane.data()[n * 16 + p];
                    assert!((y.data()[(n * 3 + c) * 16 + p] - want).abs() < 1e-15);
                }
            }
        }
        let g_ch = randn(&mut rng, &[2, 3]);
        let y2 = mul_channel_gate(&f, &g_ch).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for p in 0..16 {
                    let want = f.data()[(n * 3 + c) * 16 + p] * g_ch.data()[n * 3 + c];
                    assert!((y2.data()[(n * 3 + c) * 16 + p] - want).abs() < 1e-15);
                }
            }
        }
    }
}
