//! Matrix-product kernels, the hot loops of the crate.
//!
//! Each kernel assigns whole output rows to tasks and keeps the inner
//! accumulation order fixed, so the parallel and sequential paths produce
//! bit-identical results. The `_seq` variants are kept public for the
//! benchmark suite.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the rayon dispatch overhead dominates.
/// Training parallelizes across samples instead, so only genuinely large
/// products take the threaded path.
#[cfg(feature = "parallel")]
const PAR_THRESHOLD: usize = 2 * 1024 * 1024;

/// Rows handed to one parallel task at a time.
#[cfg(feature = "parallel")]
fn row_block(m: usize, k: usize, n: usize) -> usize {
    // Aim for tasks of ~128k multiply-adds so stealing overhead stays small.
    (128 * 1024 / (k * n).max(1)).clamp(1, m)
}

/// C[m×n] = A[m×k] · B[k×n]
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_THRESHOLD {
        let rows = row_block(m, k, n);
        c.par_chunks_mut(rows * n).enumerate().for_each(|(blk, chunk)| {
            for (off, row) in chunk.chunks_mut(n).enumerate() {
                nn_row(a, b, k, n, blk * rows + off, row);
            }
        });
        return c;
    }
    for (i, row) in c.chunks_mut(n).enumerate() {
        nn_row(a, b, k, n, i, row);
    }
    c
}

/// Sequential reference path for [`matmul_nn`].
pub fn matmul_nn_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for (i, row) in c.chunks_mut(n).enumerate() {
        nn_row(a, b, k, n, i, row);
    }
    c
}

#[inline]
fn nn_row(a: &[f64], b: &[f64], k: usize, n: usize, i: usize, row: &mut [f64]) {
    // Two k-steps per pass; every output element accumulates independently,
    // so the loop over the contiguous B rows vectorizes.
    let arow = &a[i * k..(i + 1) * k];
    let mut p = 0;
    while p + 1 < k {
        let a0 = arow[p];
        let a1 = arow[p + 1];
        let b0 = &b[p * n..(p + 1) * n];
        let b1 = &b[(p + 1) * n..(p + 2) * n];
        for ((cij, x0), x1) in row.iter_mut().zip(b0).zip(b1) {
            *cij += a0 * x0 + a1 * x1;
        }
        p += 2;
    }
    if p < k {
        let a0 = arow[p];
        let b0 = &b[p * n..(p + 1) * n];
        for (cij, x0) in row.iter_mut().zip(b0) {
            *cij += a0 * x0;
        }
    }
}

/// C[m×n] = A[m×k] · B[n×k]ᵀ. The transpose costs O(kn) against the O(mkn)
/// product, so this reuses the one tuned kernel.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    matmul_nn(a, &bt, m, k, n)
}

/// C[m×n] = A[k×m]ᵀ · B[k×n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut at = vec![0.0; m * k];
    for p in 0..k {
        for i in 0..m {
            at[i * k + p] = a[p * m + i];
        }
    }
    matmul_nn(&at, b, m, k, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_naive() {
        let mut rng = crate::rng::Rng::new(42);
        for &(m, k, n) in &[(1, 1, 1), (3, 4, 5), (17, 9, 13), (64, 64, 64)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
            let want = naive(&a, &b, m, k, n);
            let got = matmul_nn(&a, &b, m, k, n);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
            assert_eq!(matmul_nn_seq(&a, &b, m, k, n), got);

            // A·Bᵀ with B stored as [n×k]
            let mut bt = vec![0.0; n * k];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let got_nt = matmul_nt(&a, &bt, m, k, n);
            for (g, w) in got_nt.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }

            // Aᵀ·B with A stored as [k×m]
            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let got_tn = matmul_tn(&at, &b, m, k, n);
            for (g, w) in got_tn.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parallel_path_is_bit_identical() {
        let mut rng = crate::rng::Rng::new(7);
        let (m, k, n) = (160, 128, 128); // above the parallel threshold
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        assert_eq!(matmul_nn(&a, &b, m, k, n), matmul_nn_seq(&a, &b, m, k, n));
    }
}
