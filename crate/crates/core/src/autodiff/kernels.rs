//! Numeric kernels shared by the forward and backward passes.
//!
//! Every output element of `matmul` is accumulated in ascending `k` order
//! starting from zero, independently of how many rows or columns the call
//! covers. Row-batched and row-by-row evaluation therefore agree bitwise.

use crate::tensor::Scalar;

const MR: usize = 4;
const NR: usize = 16;

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// `out = a · b` with `a: m×k`, `b: k×n`, all row-major.
pub fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![F::zero(); m * n];
    let mut i0 = 0;
    while i0 < m {
        let mr = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let nr = NR.min(n - j0);
            if mr == MR && nr == NR {
                block_full(a, b, &mut out, i0, j0, k, n);
            } else {
                block_edge(a, b, &mut out, i0, j0, mr, nr, k, n);
            }
            j0 += NR;
        }
        i0 += MR;
    }
    out
}

#[inline(always)]
fn block_full<F: Scalar>(a: &[F], b: &[F], out: &mut [F], i0: usize, j0: usize, k: usize, n: usize) {
    let mut acc = [[F::zero(); NR]; MR];
    for kk in 0..k {
        let brow: &[F; NR] = b[kk * n + j0..kk * n + j0 + NR].try_into().unwrap();
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let av = a[(i0 + r) * k + kk];
            for c in 0..NR {
                acc_row[c] = acc_row[c] + av * brow[c];
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        out[(i0 + r) * n + j0..(i0 + r) * n + j0 + NR].copy_from_slice(acc_row);
    }
}

#[allow(clippy::too_many_arguments)]
fn block_edge<F: Scalar>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    i0: usize,
    j0: usize,
    mr: usize,
    nr: usize,
    k: usize,
    n: usize,
) {
    for r in 0..mr {
        let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
        for c in 0..nr {
            let mut acc = F::zero();
            for (kk, &av) in arow.iter().enumerate() {
                acc = acc + av * b[kk * n + j0 + c];
            }
            out[(i0 + r) * n + j0 + c] = acc;
        }
    }
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn add_assign<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
