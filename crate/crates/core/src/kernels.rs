//! Raw matrix kernels behind the tape ops.
//!
//! Every kernel writes each output row from a single thread in a fixed
//! order, so results are bit-identical regardless of the rayon pool size.

use rayon::prelude::*;

use crate::tensor::Real;

/// Below this many multiply-adds the rayon fan-out costs more than it saves.
const PAR_THRESHOLD: usize = 16_384;

/// C[m x n] = A[m x k] * B[k x n], all row-major.
pub fn mm_nn<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [S])| {
        out_row.fill(S::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_il * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// C[m x n] = A[m x k] * B^T where B is [n x k] row-major.
pub fn mm_nt<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [S])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// C[m x n] = A^T * B where A is [k x m] and B is [k x n], row-major.
pub fn mm_tn<S: Real>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |(i, out_row): (usize, &mut [S])| {
        out_row.fill(S::zero());
        for l in 0..k {
            let a_li = a[l * m + i];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_li * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// Batched C[b] = A[b] * B[b] with A [bs x m x k], B [bs x k x n].
/// `trans_b` treats B as [bs x n x k] and multiplies by its transpose.
pub fn bmm<S: Real>(
    a: &[S],
    b: &[S],
    bs: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    out: &mut [S],
) {
    debug_assert_eq!(out.len(), bs * m * n);
    let slab = |(bi, out_slab): (usize, &mut [S])| {
        let a_s = &a[bi * m * k..(bi + 1) * m * k];
        let b_s = &b[bi * k * n..(bi + 1) * k * n];
        if trans_b {
            mm_nt_serial(a_s, b_s, m, k, n, out_slab);
        } else {
            mm_nn_serial(a_s, b_s, m, k, n, out_slab);
        }
    };
    if bs * m * k * n >= PAR_THRESHOLD && bs > 1 {
        out.par_chunks_mut(m * n).enumerate().for_each(slab);
    } else {
        out.chunks_mut(m * n).enumerate().for_each(slab);
    }
}

fn mm_nn_serial<S: Real>(a: &[S], b: &[S], _m: usize, k: usize, n: usize, out: &mut [S]) {
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        out_row.fill(S::zero());
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_il * bv;
            }
        }
    }
}

fn mm_nt_serial<S: Real>(a: &[S], b: &[S], _m: usize, k: usize, n: usize, out: &mut [S]) {
    for (i, out_row) in out.chunks_mut(n).enumerate() {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
}

/// dB[k x n] += A^T * dC for the batched transpose-B backward path,
/// with A [m x k], dC [m x n]; accumulates into `out`.
pub fn mm_tn_acc<S: Real>(a: &[S], dc: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &dc[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let o_row = &mut out[l * n..(l + 1) * n];
            for (o, &cv) in o_row.iter_mut().zip(c_row) {
                *o = *o + a_il * cv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn mm_variants_agree_with_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        mm_nn(&a, &b, m, k, n, &mut got);
        assert_eq!(got, want);

        // B^T layout: [n x k]
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut got_nt = vec![0.0; m * n];
        mm_nt(&a, &bt, m, k, n, &mut got_nt);
        for (x, y) in got_nt.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // A^T layout: [k x m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut got_tn = vec![0.0; m * n];
        mm_tn(&at, &b, m, k, n, &mut got_tn);
        for (x, y) in got_tn.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bmm_matches_per_slab_matmul() {
        let (bs, m, k, n) = (3, 4, 5, 2);
        let a: Vec<f64> = (0..bs * m * k).map(|i| (i as f64 * 0.11).sin()).collect();
        let b: Vec<f64> = (0..bs * k * n).map(|i| (i as f64 * 0.19).cos()).collect();
        let mut got = vec![0.0; bs * m * n];
        bmm(&a, &b, bs, m, k, n, false, &mut got);
        for bi in 0..bs {
            let want = naive(
                &a[bi * m * k..(bi + 1) * m * k],
                &b[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
            );
            assert_eq!(&got[bi * m * n..(bi + 1) * m * n], &want[..]);
        }
    }
}
