//! Dense kernels shared by the forward and backward passes.
//!
//! Loops are ordered so the innermost one streams contiguous memory and
//! auto-vectorizes. Accumulation order is fixed, so results are
//! reproducible bit for bit on a given build.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;

const MR: usize = 4;
const NR: usize = 16;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    let full_cols = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j < full_cols {
            tile(a, b, out, i, j, k, n);
            j += NR;
        }
        if j < n {
            for r in i..i + MR {
                edge_row(a, b, out, r, j, k, n);
            }
        }
        i += MR;
    }
    while i < m {
        edge_row(a, b, out, i, 0, k, n);
        i += 1;
    }
}

/// Accumulates an `MR×NR` block of `out` in registers over the whole `k`.
#[inline(always)]
fn tile<T: Real>(a: &[T], b: &[T], out: &mut [T], i: usize, j: usize, k: usize, n: usize) {
    let mut acc = [[T::ZERO; NR]; MR];
    let rows: [&[T]; MR] = core::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
    for p in 0..k {
        let bv: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        for r in 0..MR {
            let av = rows[r][p];
            for c in 0..NR {
                acc[r][c] += av * bv[c];
            }
        }
    }
    for r in 0..MR {
        let o = &mut out[(i + r) * n + j..(i + r) * n + j + NR];
        for c in 0..NR {
            o[c] += acc[r][c];
        }
    }
}

fn edge_row<T: Real>(a: &[T], b: &[T], out: &mut [T], i: usize, j: usize, k: usize, n: usize) {
    let orow = &mut out[i * n + j..(i + 1) * n];
    for p in 0..k {
        let av = a[i * k + p];
        let brow = &b[p * n + j..(p + 1) * n];
        for (o, &bv) in orow.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// `a[m×k] · b[k×n]`
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn matmul_tn_acc<T: Real>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let at = transpose(a, m, k);
    matmul_acc(&at, g, out, k, m, n);
}

/// `out[m×k] += g · bᵀ` for `g[m×n]`, `b[k×n]`.
pub fn matmul_nt_acc<T: Real>(g: &[T], b: &[T], out: &mut [T], m: usize, n: usize, k: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, out, m, n, k);
}

pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Dot product with lane-split accumulators so the reduction vectorizes.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for c in 0..chunks {
        let xa = &a[c * LANES..(c + 1) * LANES];
        let xb = &b[c * LANES..(c + 1) * LANES];
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * LANES..a.len() {
        tail += a[i] * b[i];
    }
    let mut s = T::ZERO;
    for v in acc {
        s += v;
    }
    s + tail
}

/// Row-wise softmax over contiguous slices of length `len`, in place.
pub fn softmax_rows_inplace<T: Real>(x: &mut [T], len: usize) {
    for row in x.chunks_exact_mut(len) {
        let mut max = row[0];
        for &v in row.iter() {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}
