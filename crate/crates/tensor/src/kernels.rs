//! Matrix multiply kernels behind the tape ops.
//!
//! Three access patterns cover every forward and backward product in the
//! graph without materializing transposes: `mm_nn` (a·b), `mm_nt` (a·bᵀ),
//! `mm_tn` (aᵀ·b). Each has a sequential and, with the `parallel` feature,
//! a rayon row-parallel variant. Both variants accumulate each output
//! element in the same index order, so results are bit-identical across
//! the two paths and across thread counts.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this flop count the rayon dispatch overhead outweighs the win.
#[cfg(feature = "parallel")]
const PAR_MIN_FLOPS: usize = 1 << 15;

// ── a [m,k] · b [k,n] → out [m,n] ───────────────────────────────────────

pub fn mm_nn_seq<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        mm_nn_row(a_row, b, n, o_row);
    }
}

fn mm_nn_row<T: Scalar>(a_row: &[T], b: &[T], n: usize, o_row: &mut [T]) {
    for v in o_row.iter_mut() {
        *v = T::zero();
    }
    for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
        for (o, &bv) in o_row.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

#[cfg(feature = "parallel")]
pub fn mm_nn_par<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    out.par_chunks_exact_mut(n)
        .enumerate()
        .for_each(|(i, o_row)| mm_nn_row(&a[i * k..(i + 1) * k], b, n, o_row));
}

pub fn mm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_FLOPS && m > 1 {
        mm_nn_par(a, b, m, k, n, out);
        return;
    }
    mm_nn_seq(a, b, m, k, n, out);
}

// ── a [m,q] · bᵀ, b [p,q] → out [m,p] ───────────────────────────────────

pub fn mm_nt_seq<T: Scalar>(a: &[T], b: &[T], m: usize, q: usize, p: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * q);
    debug_assert_eq!(b.len(), p * q);
    debug_assert_eq!(out.len(), m * p);
    for (a_row, o_row) in a.chunks_exact(q).zip(out.chunks_exact_mut(p)) {
        mm_nt_row(a_row, b, q, o_row);
    }
}

fn mm_nt_row<T: Scalar>(a_row: &[T], b: &[T], q: usize, o_row: &mut [T]) {
    for (o, b_row) in o_row.iter_mut().zip(b.chunks_exact(q)) {
        let mut acc = T::zero();
        for (&av, &bv) in a_row.iter().zip(b_row) {
            acc = acc + av * bv;
        }
        *o = acc;
    }
}

#[cfg(feature = "parallel")]
pub fn mm_nt_par<T: Scalar>(a: &[T], b: &[T], m: usize, q: usize, p: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * q);
    out.par_chunks_exact_mut(p)
        .enumerate()
        .for_each(|(i, o_row)| mm_nt_row(&a[i * q..(i + 1) * q], b, q, o_row));
}

pub fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, q: usize, p: usize, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    if m * q * p >= PAR_MIN_FLOPS && m > 1 {
        mm_nt_par(a, b, m, q, p, out);
        return;
    }
    mm_nt_seq(a, b, m, q, p, out);
}

// ── aᵀ · b, a [m,n], b [m,k] → out [n,k] ────────────────────────────────

pub fn mm_tn_seq<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * k);
    for (i, o_row) in out.chunks_exact_mut(k).enumerate() {
        mm_tn_row(a, b, m, n, k, i, o_row);
    }
}

// Row i of the output sums a[mi,i]·b[mi,:] over mi in ascending order;
// the parallel variant keeps that order per row.
fn mm_tn_row<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, i: usize, o_row: &mut [T]) {
    for v in o_row.iter_mut() {
        *v = T::zero();
    }
    for mi in 0..m {
        let av = a[mi * n + i];
        let b_row = &b[mi * k..(mi + 1) * k];
        for (o, &bv) in o_row.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

#[cfg(feature = "parallel")]
pub fn mm_tn_par<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    out.par_chunks_exact_mut(k)
        .enumerate()
        .for_each(|(i, o_row)| mm_tn_row(a, b, m, n, k, i, o_row));
}

pub fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize, out: &mut [T]) {
    #[cfg(feature = "parallel")]
    if m * n * k >= PAR_MIN_FLOPS && n > 1 {
        mm_tn_par(a, b, m, n, k, out);
        return;
    }
    mm_tn_seq(a, b, m, n, k, out);
}
