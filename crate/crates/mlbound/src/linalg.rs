//! Dense symmetric linear algebra for kernel-sized problems.
//!
//! EP needs one Cholesky factorization plus triangular solves with m
//! right-hand sides per sweep, at m up to a few thousand. The routines
//! here are blocked so the O(m^3) work runs through `general_mat_mul`
//! (cache-tiled matrix multiply) instead of scalar loops.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use thiserror::Error;

const BLOCK: usize = 128;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not positive definite: leading minor {0} has non-positive pivot")]
    NotPositiveDefinite(usize),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Only the lower triangle of `a` is read. The strict upper triangle of
/// the result is zero.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>, LinalgError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(LinalgError::Dimension(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = a.to_owned();
    // zero the strict upper triangle
    for i in 0..n {
        for j in (i + 1)..n {
            l[[i, j]] = 0.0;
        }
    }
    let mut k = 0;
    while k < n {
        let nb = BLOCK.min(n - k);
        // diagonal block: unblocked factorization
        {
            let mut d = l.slice_mut(s![k..k + nb, k..k + nb]);
            unblocked_cholesky(&mut d, k)?;
        }
        if k + nb < n {
            // panel solve: L21 = A21 * L11^-T
            let (top, mut bottom) =
                l.multi_slice_mut((s![k..k + nb, k..k + nb], s![k + nb.., k..k + nb]));
            trsm_right_lower_transpose(top.view(), &mut bottom);
            // trailing update: A22 -= L21 * L21^T (lower triangle only,
            // done in column blocks so gemm does the heavy lifting)
            let panel = l.slice(s![k + nb.., k..k + nb]).to_owned();
            let mut j = k + nb;
            while j < n {
                let jb = BLOCK.min(n - j);
                let left = panel.slice(s![j - (k + nb).., ..]);
                let rhs = panel.slice(s![j - (k + nb)..j - (k + nb) + jb, ..]);
                let mut target = l.slice_mut(s![j.., j..j + jb]);
                ndarray::linalg::general_mat_mul(-1.0, &left, &rhs.t(), 1.0, &mut target);
                j += jb;
            }
        }
        k += nb;
    }
    // the trailing update also touched the upper triangle of diagonal
    // blocks; re-zero it
    for i in 0..n {
        for j in (i + 1)..n {
            l[[i, j]] = 0.0;
        }
    }
    Ok(l)
}

fn unblocked_cholesky(a: &mut ArrayViewMut2<f64>, offset: usize) -> Result<(), LinalgError> {
    let n = a.nrows();
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= a[[j, k]] * a[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(LinalgError::NotPositiveDefinite(offset + j));
        }
        let d = d.sqrt();
        a[[j, j]] = d;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= a[[i, k]] * a[[j, k]];
            }
            a[[i, j]] = v / d;
        }
    }
    Ok(())
}

// X * L^T = B  solved in place for X (B overwritten), L lower triangular.
fn trsm_right_lower_transpose(l: ArrayView2<f64>, b: &mut ArrayViewMut2<f64>) {
    let n = l.nrows();
    for j in 0..n {
        let d = l[[j, j]];
        let mut col_j = b.column(j).to_owned();
        col_j.mapv_inplace(|v| v / d);
        b.column_mut(j).assign(&col_j);
        for jj in (j + 1)..n {
            let factor = l[[jj, j]];
            if factor != 0.0 {
                let src = col_j.view();
                let mut dst = b.column_mut(jj);
                dst.zip_mut_with(&src, |d, &s| *d -= factor * s);
            }
        }
    }
}

/// Solve L X = B for X, with L lower triangular and B m x k (blocked
/// forward substitution; gemm carries the off-diagonal updates).
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    let mut i = 0;
    while i < n {
        let ib = BLOCK.min(n - i);
        // unblocked solve on the diagonal block
        for r in 0..ib {
            let (done, mut row) = x.multi_slice_mut((s![i..i + r, ..], s![i + r, ..]));
            for c in 0..r {
                let factor = l[[i + r, i + c]];
                if factor != 0.0 {
                    row.zip_mut_with(&done.row(c), |d, &s| *d -= factor * s);
                }
            }
            let d = l[[i + r, i + r]];
            row.mapv_inplace(|v| v / d);
        }
        if i + ib < n {
            let (solved, mut rest) = x.multi_slice_mut((s![i..i + ib, ..], s![i + ib.., ..]));
            let lpanel = l.slice(s![i + ib.., i..i + ib]);
            ndarray::linalg::general_mat_mul(-1.0, &lpanel, &solved.view(), 1.0, &mut rest);
        }
        i += ib;
    }
    x
}

/// Solve L^T x = b for a single right-hand side (back substitution).
pub fn solve_lower_transpose_vec(l: ArrayView2<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut v = x[i];
        for j in (i + 1)..n {
            v -= l[[j, i]] * x[j];
        }
        x[i] = v / l[[i, i]];
    }
    x
}

/// log-determinant of the matrix whose Cholesky factor is `l`.
pub fn log_det_from_cholesky(l: ArrayView2<f64>) -> f64 {
    (0..l.nrows()).map(|i| 2.0 * l[[i, i]].ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let mut a = g.dot(&g.t());
        for i in 0..n {
            a[[i, i]] += n as f64 * 0.1;
        }
        a
    }

    #[test]
    fn factor_reconstructs_matrix() {
        for &n in &[1usize, 3, 17, 129, 300] {
            let a = random_spd(n, n as u64);
            let l = cholesky(a.view()).unwrap();
            let r = l.dot(&l.t());
            let err = (&r - &a).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-9 * n as f64, "n = {n}, err = {err}");
        }
    }

    #[test]
    fn rejects_indefinite() {
        let a = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(matches!(
            cholesky(a.view()),
            Err(LinalgError::NotPositiveDefinite(_))
        ));
    }

    #[test]
    fn forward_solve_matches_direct() {
        let n = 200;
        let a = random_spd(n, 7);
        let l = cholesky(a.view()).unwrap();
        let b = Array2::from_shape_fn((n, 3), |(i, j)| ((i + j) as f64).sin());
        let x = solve_lower(l.view(), b.view());
        let r = l.dot(&x);
        let err = (&r - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn transpose_solve_roundtrip() {
        let n = 57;
        let a = random_spd(n, 3);
        let l = cholesky(a.view()).unwrap();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).cos()).collect();
        let x = solve_lower_transpose_vec(l.view(), &b);
        let xa = Array1::from(x);
        let r = l.t().dot(&xa);
        for i in 0..n {
            assert!((r[i] - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn log_det_agrees_with_product_of_pivots() {
        let a = random_spd(40, 11);
        let l = cholesky(a.view()).unwrap();
        let ld = log_det_from_cholesky(l.view());
        // determinant via the factor itself on a small matrix is the
        // same computation; cross-check against a scaled identity
        let b = Array2::<f64>::eye(5) * 3.0;
        let lb = cholesky(b.view()).unwrap();
        assert!((log_det_from_cholesky(lb.view()) - 5.0 * 3.0f64.ln()).abs() < 1e-12);
        assert!(ld.is_finite());
    }
}
