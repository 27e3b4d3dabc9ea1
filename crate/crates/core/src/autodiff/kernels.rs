//! Dense kernels. Every output element is reduced sequentially in index
//! order; the optional row parallelism only splits independent output rows,
//! so results are bit-identical for any thread count.

use crate::Scalar;

#[cfg(feature = "parallel")]
const PAR_MIN_WORK: usize = 1 << 15;

#[inline]
fn for_each_row<S: Scalar>(out: &mut [S], row_len: usize, work: usize, f: impl Fn(usize, &mut [S]) + Sync + Send) {
    #[cfg(feature = "parallel")]
    {
        if work >= PAR_MIN_WORK && rayon::current_num_threads() > 1 {
            use rayon::prelude::*;
            out.par_chunks_mut(row_len)
                .enumerate()
                .for_each(|(i, row)| f(i, row));
            return;
        }
    }
    let _ = work;
    out.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (kk, &av) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    });
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for_each_row(out, n, m * k * n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in ar.iter().zip(br) {
                acc += x * y;
            }
            *o += acc;
        }
    });
}

/// `out[k×n] += a[m×k]ᵀ · c[m×n]`
pub(crate) fn matmul_tn_acc<S: Scalar>(a: &[S], c: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for_each_row(out, n, m * k * n, |kk, row| {
        for i in 0..m {
            let av = a[i * k + kk];
            let cr = &c[i * n..(i + 1) * n];
            for (o, &cv) in row.iter_mut().zip(cr) {
                *o += av * cv;
            }
        }
    });
}

#[inline]
pub(crate) fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of(0.797_884_560_802_865_4);
    let k = S::of(0.044_715);
    let half = S::of(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh_portable())
}

#[inline]
pub(crate) fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::of(0.797_884_560_802_865_4);
    let k = S::of(0.044_715);
    let half = S::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh_portable();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + S::of(3.0) * k * x * x)
}

/// Per-row `(dot, |a|², |b|²)` over the trailing axis.
pub(crate) fn row_cosine_parts<'a, S: Scalar>(a: &'a [S], b: &'a [S], dim: usize) -> impl Iterator<Item = (S, S, S)> + 'a {
    a.chunks(dim).zip(b.chunks(dim)).map(|(ar, br)| {
        let mut dot = S::zero();
        let mut na = S::zero();
        let mut nb = S::zero();
        for (&x, &y) in ar.iter().zip(br) {
            dot += x * y;
            na += x * x;
            nb += y * y;
        }
        (dot, na, nb)
    })
}
