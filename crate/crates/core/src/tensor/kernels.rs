//! Matrix-multiply and elementwise kernels.
//!
//! Every kernel has a sequential form. With the `parallel` feature the
//! dispatching entry points split large problems across rayon workers by
//! output row; each output element is still produced by exactly one worker in
//! a fixed summation order, so results are bit-identical to the sequential
//! path.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the sequential path wins.
#[cfg(feature = "parallel")]
const PAR_FLOPS: usize = 1 << 16;

#[cfg(feature = "parallel")]
const PAR_ELEMS: usize = 1 << 15;

/// `c[m,n] = a[m,k] @ b[k,n]`
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOPS && m > 1 {
        return matmul_nn_par(a, b, m, k, n);
    }
    matmul_nn_seq(a, b, m, k, n)
}

pub fn matmul_nn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for (row, c_row) in c.chunks_exact_mut(n).enumerate() {
        nn_row(&a[row * k..(row + 1) * k], b, n, c_row);
    }
    c
}

#[cfg(feature = "parallel")]
pub fn matmul_nn_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    c.par_chunks_exact_mut(n)
        .enumerate()
        .for_each(|(row, c_row)| nn_row(&a[row * k..(row + 1) * k], b, n, c_row));
    c
}

#[inline]
fn nn_row(a_row: &[f64], b: &[f64], n: usize, c_row: &mut [f64]) {
    for (p, &a_ip) in a_row.iter().enumerate() {
        if a_ip == 0.0 {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (c, &bv) in c_row.iter_mut().zip(b_row) {
            *c += a_ip * bv;
        }
    }
}

/// `c[m,k] = g[m,n] @ b[k,n]^T`
pub fn matmul_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOPS && m > 1 {
        let mut c = vec![0.0; m * k];
        c.par_chunks_exact_mut(k)
            .enumerate()
            .for_each(|(row, c_row)| nt_row(&g[row * n..(row + 1) * n], b, n, c_row));
        return c;
    }
    let mut c = vec![0.0; m * k];
    for (row, c_row) in c.chunks_exact_mut(k).enumerate() {
        nt_row(&g[row * n..(row + 1) * n], b, n, c_row);
    }
    c
}

#[inline]
fn nt_row(g_row: &[f64], b: &[f64], n: usize, c_row: &mut [f64]) {
    for (p, c) in c_row.iter_mut().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        *c = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
    }
}

/// `c[k,n] = a[m,k]^T @ g[m,n]`
pub fn matmul_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOPS && k > 1 {
        let mut c = vec![0.0; k * n];
        c.par_chunks_exact_mut(n)
            .enumerate()
            .for_each(|(p, c_row)| tn_row(a, g, m, k, n, p, c_row));
        return c;
    }
    let mut c = vec![0.0; k * n];
    for (p, c_row) in c.chunks_exact_mut(n).enumerate() {
        tn_row(a, g, m, k, n, p, c_row);
    }
    c
}

#[inline]
fn tn_row(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, p: usize, c_row: &mut [f64]) {
    for i in 0..m {
        let a_ip = a[i * k + p];
        if a_ip == 0.0 {
            continue;
        }
        let g_row = &g[i * n..(i + 1) * n];
        for (c, &gv) in c_row.iter_mut().zip(g_row) {
            *c += a_ip * gv;
        }
    }
}

/// Batched `c[b] = a[b] @ b[b]` over `batch` independent problems laid out
/// contiguously. Parallelises over the batch.
pub fn bmm_nn(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    let body = |(bi, c_blk): (usize, &mut [f64])| {
        let a_blk = &a[bi * m * k..(bi + 1) * m * k];
        let b_blk = &b[bi * k * n..(bi + 1) * k * n];
        for (row, c_row) in c_blk.chunks_exact_mut(n).enumerate() {
            nn_row(&a_blk[row * k..(row + 1) * k], b_blk, n, c_row);
        }
    };
    #[cfg(feature = "parallel")]
    if batch * m * k * n >= PAR_FLOPS && batch > 1 {
        c.par_chunks_exact_mut(m * n).enumerate().for_each(body);
        return c;
    }
    c.chunks_exact_mut(m * n).enumerate().for_each(body);
    c
}

/// Applies `f` elementwise, in parallel for large inputs.
pub fn map(xs: &[f64], f: impl Fn(f64) -> f64 + Sync + Send) -> Vec<f64> {
    #[cfg(feature = "parallel")]
    if xs.len() >= PAR_ELEMS {
        return xs.par_iter().map(|&x| f(x)).collect();
    }
    xs.iter().map(|&x| f(x)).collect()
}

pub fn zip_map(xs: &[f64], ys: &[f64], f: impl Fn(f64, f64) -> f64 + Sync + Send) -> Vec<f64> {
    debug_assert_eq!(xs.len(), ys.len());
    #[cfg(feature = "parallel")]
    if xs.len() >= PAR_ELEMS {
        return xs.par_iter().zip(ys).map(|(&x, &y)| f(x, y)).collect();
    }
    xs.iter().zip(ys).map(|(&x, &y)| f(x, y)).collect()
}

/// Whether this build dispatches large kernels to rayon.
pub const fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
