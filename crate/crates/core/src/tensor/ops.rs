use std::sync::Arc;

use super::kernels;
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Additive mask value for excluded attention positions. `exp(NEG_MASK - m)`
/// underflows to exactly zero in double precision.
pub const NEG_MASK: f64 = -1e30;

/// Denominators smaller than this in absolute value are rejected by `div`.
const DIV_EPS: f64 = 1e-12;

/// `[n, n]` additive mask: 0 where `j <= i`, [`NEG_MASK`] where `j > i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = NEG_MASK;
        }
    }
    Tensor::new(&[n, n], data).expect("causal mask shape")
}

/// How an input maps onto a broadcast output.
enum Bcast {
    Same,
    /// Input equals the trailing block of the output; index is `i % len`.
    Tile(usize),
    Map(Arc<Vec<usize>>),
}

impl Bcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Tile(len) => i % len,
            Bcast::Map(m) => m[i],
        }
    }

    fn reduce(&self, g: &[f64], in_len: usize) -> Vec<f64> {
        match self {
            Bcast::Same => g.to_vec(),
            _ => {
                let mut out = vec![0.0; in_len];
                for (i, &gv) in g.iter().enumerate() {
                    out[self.index(i)] += gv;
                }
                out
            }
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?} (axis {i}: {da} vs {db})"),
                ))
            }
        };
    }
    Ok(out)
}

fn bcast_plan(input: &[usize], out: &[usize]) -> Bcast {
    if input == out {
        return Bcast::Same;
    }
    let mut trimmed = input;
    while trimmed.len() > 1 && trimmed[0] == 1 {
        trimmed = &trimmed[1..];
    }
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return Bcast::Tile(numel(trimmed));
    }
    let rank = out.len();
    let pad = rank - input.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..input.len()).rev() {
        strides[ax + pad] = if input[ax] == 1 { 0 } else { s };
        s *= input[ax];
    }
    let total = numel(out);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Bcast::Map(Arc::new(map))
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn norm_axis(op: &'static str, axis: isize, ndim: usize) -> Result<usize> {
    let ax = if axis < 0 { axis + ndim as isize } else { axis };
    if ax < 0 || ax as usize >= ndim {
        return Err(Error::shape(op, format!("axis {axis} out of range for rank {ndim}")));
    }
    Ok(ax as usize)
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tensor {
    fn binary(&self, other: &Tensor, op: BinOp, name: &'static str) -> Result<Tensor> {
        let out_shape = broadcast_shape(name, self.shape(), other.shape())?;
        let pa = bcast_plan(self.shape(), &out_shape);
        let pb = bcast_plan(other.shape(), &out_shape);
        let (a, b) = (self.data(), other.data());
        if let BinOp::Div = op {
            if let Some(bad) = b.iter().find(|v| v.abs() < DIV_EPS) {
                return Err(Error::Numeric(format!(
                    "division by {bad:e} (|denominator| < {DIV_EPS:e})"
                )));
            }
        }
        let n = numel(&out_shape);
        let f = |x: f64, y: f64| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let data = match (&pa, &pb) {
            (Bcast::Same, Bcast::Same) => kernels::zip_map(a, b, f),
            _ => (0..n).map(|i| f(a[pa.index(i)], b[pb.index(i)])).collect(),
        };
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (lhs, rhs) = (&ctx.parents[0], &ctx.parents[1]);
                let g = ctx.grad;
                let (a, b) = (lhs.data(), rhs.data());
                let ga = lhs.requires_grad().then(|| match op {
                    BinOp::Add | BinOp::Sub => pa.reduce(g, a.len()),
                    BinOp::Mul => {
                        let t: Vec<f64> =
                            g.iter().enumerate().map(|(i, gv)| gv * b[pb.index(i)]).collect();
                        pa.reduce(&t, a.len())
                    }
                    BinOp::Div => {
                        let t: Vec<f64> =
                            g.iter().enumerate().map(|(i, gv)| gv / b[pb.index(i)]).collect();
                        pa.reduce(&t, a.len())
                    }
                });
                let gb = rhs.requires_grad().then(|| match op {
                    BinOp::Add => pb.reduce(g, b.len()),
                    BinOp::Sub => {
                        let t: Vec<f64> = g.iter().map(|v| -v).collect();
                        pb.reduce(&t, b.len())
                    }
                    BinOp::Mul => {
                        let t: Vec<f64> =
                            g.iter().enumerate().map(|(i, gv)| gv * a[pa.index(i)]).collect();
                        pb.reduce(&t, b.len())
                    }
                    BinOp::Div => {
                        let t: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, gv)| {
                                let bv = b[pb.index(i)];
                                -gv * a[pa.index(i)] / (bv * bv)
                            })
                            .collect();
                        pb.reduce(&t, b.len())
                    }
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Add, "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Sub, "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Mul, "mul")
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, BinOp::Div, "div")
    }

    /// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
    fn unary(
        &self,
        f: impl Fn(f64) -> f64 + Sync + Send,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let data = kernels::map(self.data(), f);
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |ctx| {
            let x = ctx.parents[0].data();
            let g: Vec<f64> = ctx
                .grad
                .iter()
                .zip(x.iter().zip(ctx.out))
                .map(|(gv, (&xv, &yv))| gv * df(xv, yv))
                .collect();
            vec![Some(g)]
        })
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        if let Some(bad) = self.data().iter().find(|v| **v < 0.0) {
            return Err(Error::Numeric(format!("sqrt of negative value {bad}")));
        }
        Ok(self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 }))
    }

    /// `|x|`, subgradient 0 at 0.
    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            |x| 0.5 * x * (1.0 + (K * (x + A * x * x * x)).tanh()),
            |x, _| {
                let u = K * (x + A * x * x * x);
                let t = u.tanh();
                let du = K * (1.0 + 3.0 * A * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        self.unary(move |x| x.max(floor), move |x, _| if x > floor { 1.0 } else { 0.0 })
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![s], vec![self.clone()], move |ctx| {
            vec![Some(vec![ctx.grad[0]; n])]
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = norm_axis("sum_axis", axis, self.ndim())?;
        let shape = self.shape();
        let outer: usize = shape[..ax].iter().product();
        let len = shape[ax];
        let inner: usize = shape[ax + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        if keepdim {
            out_shape[ax] = 1;
        } else {
            out_shape.remove(ax);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move |ctx| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                let src = &ctx.grad[o * inner..(o + 1) * inner];
                for l in 0..len {
                    g[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(g)]
        }))
    }

    pub fn mean_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let ax = norm_axis("mean_axis", axis, self.ndim())?;
        let n = self.shape()[ax] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / n))
    }

    /// Biased variance (divide by n) along `axis`.
    pub fn var_axis(&self, axis: isize, keepdim: bool) -> Result<Tensor> {
        let mu = self.mean_axis(axis, true)?;
        let centered = self.sub(&mu)?;
        centered.square().mean_axis(axis, keepdim)
    }

    /// Batched matrix product over the last two axes with broadcast batch axes.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need rank >= 2, got {sa:?} and {sb:?}"),
            ));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} @ {sb:?} ({k} vs {k2})"),
            ));
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];

        // Shared right-hand matrix: one flat product over all left rows.
        if batch_b.is_empty() {
            let rows = numel(batch_a) * m;
            let data = kernels::matmul_nn(self.data(), other.data(), rows, k, n);
            let mut shape = batch_a.to_vec();
            shape.extend([m, n]);
            return Ok(Tensor::from_op(
                shape,
                data,
                vec![self.clone(), other.clone()],
                move |ctx| {
                    let (a, b) = (&ctx.parents[0], &ctx.parents[1]);
                    let ga = a
                        .requires_grad()
                        .then(|| kernels::matmul_nt(ctx.grad, b.data(), rows, n, k));
                    let gb = b
                        .requires_grad()
                        .then(|| kernels::matmul_tn(a.data(), ctx.grad, rows, k, n));
                    vec![ga, gb]
                },
            ));
        }

        let batch = broadcast_shape("matmul", batch_a, batch_b)?;
        let nb = numel(&batch);
        let plan_a = bcast_plan(batch_a, &batch);
        let plan_b = bcast_plan(batch_b, &batch);
        let (a, b) = (self.data(), other.data());
        let data = if matches!((&plan_a, &plan_b), (Bcast::Same, Bcast::Same)) {
            kernels::bmm_nn(a, b, nb, m, k, n)
        } else {
            let mut out = Vec::with_capacity(nb * m * n);
            for bi in 0..nb {
                let ai = plan_a.index(bi);
                let bj = plan_b.index(bi);
                out.extend(kernels::matmul_nn_seq(
                    &a[ai * m * k..(ai + 1) * m * k],
                    &b[bj * k * n..(bj + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            out
        };
        let mut shape = batch.clone();
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            shape,
            data,
            vec![self.clone(), other.clone()],
            move |ctx| {
                let (ta, tb) = (&ctx.parents[0], &ctx.parents[1]);
                let (a, b) = (ta.data(), tb.data());
                let mut ga = ta.requires_grad().then(|| vec![0.0; a.len()]);
                let mut gb = tb.requires_grad().then(|| vec![0.0; b.len()]);
                for bi in 0..nb {
                    let g = &ctx.grad[bi * m * n..(bi + 1) * m * n];
                    let ai = plan_a.index(bi);
                    let bj = plan_b.index(bi);
                    if let Some(ga) = ga.as_mut() {
                        let blk = kernels::matmul_nt(g, &b[bj * k * n..(bj + 1) * k * n], m, n, k);
                        ga[ai * m * k..(ai + 1) * m * k]
                            .iter_mut()
                            .zip(&blk)
                            .for_each(|(x, y)| *x += y);
                    }
                    if let Some(gb) = gb.as_mut() {
                        let blk = kernels::matmul_tn(&a[ai * m * k..(ai + 1) * m * k], g, m, k, n);
                        gb[bj * k * n..(bj + 1) * k * n]
                            .iter_mut()
                            .zip(&blk)
                            .for_each(|(x, y)| *x += y);
                    }
                }
                vec![ga, gb]
            },
        ))
    }

    /// Softmax over the last axis, stabilised by max subtraction. Inputs at
    /// `-inf` or [`NEG_MASK`] get weight exactly 0.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        let mut out = vec![0.0; self.numel()];
        for (row, dst) in self.data().chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (o, &x) in dst.iter_mut().zip(row) {
                *o = (x - max).exp();
                total += *o;
            }
            dst.iter_mut().for_each(|o| *o /= total);
        }
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![0.0; ctx.grad.len()];
                for ((gi, yi), dst) in ctx
                    .grad
                    .chunks_exact(d)
                    .zip(ctx.out.chunks_exact(d))
                    .zip(g.chunks_exact_mut(d))
                {
                    let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                    for ((o, &gv), &yv) in dst.iter_mut().zip(gi).zip(yi) {
                        *o = yv * (gv - dot);
                    }
                }
                vec![Some(g)]
            },
        ))
    }

    /// Layer normalisation over the last axis with biased variance, then
    /// `gamma * x_hat + beta`.
    pub fn layer_norm_lastdim(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{d}]",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; self.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (src, dst)) in self
            .data()
            .chunks_exact(d)
            .zip(xhat.chunks_exact_mut(d))
            .enumerate()
        {
            let mu = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = (x - mu) * rs;
            }
        }
        let (gm, bt) = (gamma.data(), beta.data());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &xh)| xh * gm[i % d] + bt[i % d])
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            move |ctx| {
                let gm = ctx.parents[1].data();
                let g = ctx.grad;
                let gx = ctx.parents[0].requires_grad().then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gm[j];
                            gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                        }
                    }
                    gx
                });
                let ggamma = ctx.parents[1].requires_grad().then(|| {
                    let mut out = vec![0.0; d];
                    for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            out[j] += gr[j] * xr[j];
                        }
                    }
                    out
                });
                let gbeta = ctx.parents[2].requires_grad().then(|| {
                    let mut out = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        out.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                    out
                });
                vec![gx, ggamma, gbeta]
            },
        ))
    }

    /// Inverted dropout. Identity (the same tensor) when not training or `p == 0`.
    pub fn dropout(&self, p: f64, rng: &mut Rng, training: bool) -> Result<Tensor> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout rate {p} outside [0, 1]")));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = 1.0 - p;
        let scale = if keep > 0.0 { 1.0 / keep } else { 0.0 };
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.next_f64() < p { 0.0 } else { scale })
            .collect();
        let data = kernels::zip_map(self.data(), &mask, |x, m| x * m);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            move |ctx| vec![Some(kernels::zip_map(ctx.grad, &mask, |g, m| g * m))],
        ))
    }

    /// `out[i] = self[index[i]]`; gradients scatter-add back.
    pub fn gather(&self, out_shape: &[usize], index: Vec<usize>) -> Result<Tensor> {
        if numel(out_shape) != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for output shape {out_shape:?}", index.len()),
            ));
        }
        let n = self.numel();
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather", format!("index {bad} out of range {n}")));
        }
        let x = self.data();
        let data: Vec<f64> = index.iter().map(|&i| x[i]).collect();
        let index = Arc::new(index);
        Ok(Tensor::from_op(
            out_shape.to_vec(),
            data,
            vec![self.clone()],
            move |ctx| {
                let mut g = vec![0.0; n];
                for (&i, &gv) in index.iter().zip(ctx.grad) {
                    g[i] += gv;
                }
                vec![Some(g)]
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", self.shape()),
            ));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |ctx| vec![Some(ctx.grad.to_vec())],
        ))
    }

    /// Logical transpose by an axis permutation; materialises a contiguous copy.
    pub fn permute_axes(&self, order: &[usize]) -> Result<Tensor> {
        let nd = self.ndim();
        let mut seen = vec![false; nd];
        if order.len() != nd || order.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::InvalidArgument(format!(
                "{order:?} is not a permutation of the {nd} axes of {:?}",
                self.shape()
            )));
        }
        if order.iter().enumerate().all(|(i, &a)| i == a) {
            return Ok(self.clone());
        }
        let in_strides = row_major_strides(self.shape());
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape()[a]).collect();
        let strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let total = self.numel();
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..total {
            index.push(off);
            for ax in (0..nd).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        self.gather(&out_shape, index)
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let nd = self.ndim();
        if nd < 2 {
            return Err(Error::shape("transpose", "rank < 2"));
        }
        let mut order: Vec<usize> = (0..nd).collect();
        order.swap(nd - 2, nd - 1);
        self.permute_axes(&order)
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&self, axis: isize, start: usize, end: usize) -> Result<Tensor> {
        let ax = norm_axis("slice", axis, self.ndim())?;
        let shape = self.shape();
        if start >= end || end > shape[ax] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{end} invalid for axis {ax} of size {}", shape[ax]),
            ));
        }
        let outer: usize = shape[..ax].iter().product();
        let inner: usize = shape[ax + 1..].iter().product();
        let len = shape[ax];
        let mut index = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            for l in start..end {
                let base = (o * len + l) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape[ax] = end - start;
        self.gather(&out_shape, index)
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[Tensor], axis: isize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let ax = norm_axis("concat", axis, first.ndim())?;
        for p in parts {
            let ok = p.ndim() == first.ndim()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == ax || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {ax}", p.shape(), first.shape()),
                ));
            }
        }
        let outer: usize = first.shape()[..ax].iter().product();
        let inner: usize = first.shape()[ax + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[ax]).collect();
        let total_len: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total_len * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[ax] = total_len;
        Ok(Tensor::from_op(shape, data, parts.to_vec(), move |ctx| {
            let mut grads: Vec<Vec<f64>> =
                lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (g, &l) in grads.iter_mut().zip(&lens) {
                    g.extend_from_slice(&ctx.grad[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    pub fn concat_lastdim(parts: &[Tensor]) -> Result<Tensor> {
        Tensor::concat(parts, -1)
    }
}
