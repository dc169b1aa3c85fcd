//! Dense lower-triangular linear algebra: Cholesky factorization with an
//! escalating jitter policy, and forward/backward triangular substitution.
//!
//! These routines are the single implementation used by both the plain-value
//! API and the autodiff tape. Matrices are small (a few hundred rows at
//! most), so straightforward loops over contiguous storage beat any external
//! BLAS call once dispatch overhead is counted, and keep the build free of
//! system library dependencies.

use ndarray::{Array2, ArrayView2};

use crate::scalar::c;
use crate::{Error, Result, Scalar};

/// Relative jitter escalation ladder: each entry is multiplied by the mean
/// diagonal of the matrix being factored. Factorization is attempted at each
/// rung in order; failure past the last rung is an error.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-6, 1e-4];

/// Plain lower Cholesky factorization of a symmetric positive-definite
/// matrix. Only the lower triangle of `a` is read. No jitter is added.
pub fn cholesky<S: Scalar>(a: ArrayView2<S>, context: &'static str) -> Result<Array2<S>> {
    cholesky_shifted(a, S::zero(), context)
}

/// Cholesky factorization of `a + eps·I`, escalating `eps` through
/// [`JITTER_LADDER`] × mean(diag `a`) until it succeeds. Returns the factor
/// and the jitter that was actually applied.
pub fn jittered_cholesky<S: Scalar>(
    a: ArrayView2<S>,
    context: &'static str,
) -> Result<(Array2<S>, S)> {
    let n = a.nrows();
    let mean_diag = if n == 0 {
        S::zero()
    } else {
        a.diag().iter().fold(S::zero(), |acc, &v| acc + v) / c(n as f64)
    };
    let scale = mean_diag.abs();
    let mut last_eps = S::zero();
    for &rel in JITTER_LADDER.iter() {
        let eps = c::<S>(rel) * scale;
        last_eps = eps;
        if let Ok(l) = cholesky_shifted(a, eps, context) {
            return Ok((l, eps));
        }
    }
    Err(Error::NotPositiveDefinite {
        context,
        size: n,
        jitter: last_eps.to_f64(),
    })
}

fn cholesky_shifted<S: Scalar>(
    a: ArrayView2<S>,
    shift: S,
    context: &'static str,
) -> Result<Array2<S>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimMismatch {
            context,
            expected: format!("{n}x{n}"),
            got: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    let mut l = Array2::<S>::zeros((n, n));
    // Cholesky–Crout over contiguous row-major storage. `l` is freshly
    // allocated by ndarray, so the slice view always exists.
    let lbuf = l.as_slice_mut().expect("freshly allocated array is contiguous");
    for j in 0..n {
        let mut d = a[(j, j)] + shift;
        for k in 0..j {
            let v = lbuf[j * n + k];
            d -= v * v;
        }
        if !(d > S::zero()) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite {
                context,
                size: n,
                jitter: shift.to_f64(),
            });
        }
        let diag = d.sqrt();
        lbuf[j * n + j] = diag;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= lbuf[i * n + k] * lbuf[j * n + k];
            }
            lbuf[i * n + j] = s / diag;
        }
    }
    Ok(l)
}

/// Solves `L·X = B` for lower-triangular `L` by forward substitution.
///
/// Panics on shape mismatch: callers are internal and pre-validate. `L` must
/// have a nonzero diagonal (guaranteed when it came out of a Cholesky
/// factorization).
pub fn solve_lower<S: Scalar>(l: ArrayView2<S>, b: ArrayView2<S>) -> Array2<S> {
    let n = l.nrows();
    assert_eq!(l.ncols(), n, "solve_lower: L must be square");
    assert_eq!(b.nrows(), n, "solve_lower: row counts must match");
    let m = b.ncols();
    let l_owned;
    let lbuf = match l.to_slice() {
        Some(s) => s,
        None => {
            l_owned = l.as_standard_layout().into_owned();
            l_owned.as_slice().expect("standard layout is contiguous")
        }
    };
    let mut x = b.as_standard_layout().into_owned();
    let xbuf = x.as_slice_mut().expect("standard layout is contiguous");
    for i in 0..n {
        for k in 0..i {
            let lik = lbuf[i * n + k];
            if lik != S::zero() {
                for col in 0..m {
                    let v = lik * xbuf[k * m + col];
                    xbuf[i * m + col] -= v;
                }
            }
        }
        let d = lbuf[i * n + i];
        for col in 0..m {
            xbuf[i * m + col] /= d;
        }
    }
    x
}

/// Solves `Lᵀ·X = B` for lower-triangular `L` by backward substitution.
pub fn solve_lower_transpose<S: Scalar>(l: ArrayView2<S>, b: ArrayView2<S>) -> Array2<S> {
    let n = l.nrows();
    assert_eq!(l.ncols(), n, "solve_lower_transpose: L must be square");
    assert_eq!(b.nrows(), n, "solve_lower_transpose: row counts must match");
    let m = b.ncols();
    let l_owned;
    let lbuf = match l.to_slice() {
        Some(s) => s,
        None => {
            l_owned = l.as_standard_layout().into_owned();
            l_owned.as_slice().expect("standard layout is contiguous")
        }
    };
    let mut x = b.as_standard_layout().into_owned();
    let xbuf = x.as_slice_mut().expect("standard layout is contiguous");
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            // (Lᵀ)_{ik} = L_{ki}
            let lki = lbuf[k * n + i];
            if lki != S::zero() {
                for col in 0..m {
                    let v = lki * xbuf[k * m + col];
                    xbuf[i * m + col] -= v;
                }
            }
        }
        let d = lbuf[i * n + i];
        for col in 0..m {
            xbuf[i * m + col] /= d;
        }
    }
    x
}

/// Zeroes the strict upper triangle of `a` in place.
pub fn mask_lower_in_place<S: Scalar>(a: &mut Array2<S>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..a.ncols() {
            a[(i, j)] = S::zero();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_reconstructs_spd_matrix() {
        let a = array![[4.0, 2.0, 0.6], [2.0, 5.0, 1.0], [0.6, 1.0, 3.0]];
        let l = cholesky(a.view(), "test").unwrap();
        let rec = l.dot(&l.t());
        for (x, y) in rec.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        // strictly lower factor with positive diagonal
        assert_eq!(l[(0, 1)], 0.0);
        assert_eq!(l[(0, 2)], 0.0);
        assert_eq!(l[(1, 2)], 0.0);
        assert!(l.diag().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let a = Array2::<f64>::eye(4);
        let l = cholesky(a.view(), "test").unwrap();
        assert_abs_diff_eq!((&l - &a).mapv(f64::abs).sum(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cholesky_rejects_indefinite_matrix() {
        let a = array![[1.0, 2.0], [2.0, 1.0]]; // eigenvalues 3, -1
        assert!(matches!(
            cholesky(a.view(), "test"),
            Err(Error::NotPositiveDefinite { size: 2, .. })
        ));
    }

    #[test]
    fn cholesky_only_reads_lower_triangle() {
        let mut a = array![[4.0, 999.0], [2.0, 5.0]];
        let l = cholesky(a.view(), "test").unwrap();
        a[(0, 1)] = a[(1, 0)];
        let rec = l.dot(&l.t());
        for (x, y) in rec.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn jitter_ladder_rescues_rank_deficient_matrix() {
        // ones(2,2) is rank one; some rung of the ladder must succeed and
        // reconstruct within the coarsest jitter.
        let a = Array2::<f64>::ones((2, 2));
        let (l, eps) = jittered_cholesky(a.view(), "test").unwrap();
        assert!(eps > 0.0);
        let rec = l.dot(&l.t());
        let max_err = (&rec - &a)
            .iter()
            .fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_err <= 1e-4 * 1.0, "max_err = {max_err}");
    }

    #[test]
    fn jitter_ladder_gives_up_on_negative_definite_matrix() {
        let a = (-1.0) * Array2::<f64>::eye(3);
        let err = jittered_cholesky(a.view(), "kernel matrix").unwrap_err();
        match err {
            Error::NotPositiveDefinite { context, size, jitter } => {
                assert_eq!(context, "kernel matrix");
                assert_eq!(size, 3);
                assert_abs_diff_eq!(jitter, 1e-4, epsilon = 1e-12);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn jittered_identity_stays_close_to_identity() {
        let a = Array2::<f64>::eye(3);
        let (l, eps) = jittered_cholesky(a.view(), "test").unwrap();
        assert_abs_diff_eq!(eps, 1e-8, epsilon = 1e-20);
        let max_err = (&l - &a).iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(max_err < 1e-7);
    }

    #[test]
    fn triangular_solves_invert_multiplication() {
        let l = array![[2.0, 0.0, 0.0], [0.5, 1.5, 0.0], [-0.3, 0.8, 1.1]];
        let x = array![[1.0, -2.0], [0.5, 0.25], [3.0, 0.0]];

        let b = l.dot(&x);
        let got = solve_lower(l.view(), b.view());
        for (a, b) in got.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let bt = l.t().dot(&x);
        let got_t = solve_lower_transpose(l.view(), bt.view());
        for (a, b) in got_t.iter().zip(x.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn solve_works_on_strided_views() {
        let l = array![[2.0, 0.0], [1.0, 3.0]];
        let big = array![[1.0, 9.0, 2.0], [4.0, 9.0, 5.0]];
        // a non-contiguous column selection
        let b = big.select(ndarray::Axis(1), &[0, 2]);
        let x = solve_lower(l.view(), b.view());
        let rec = l.dot(&x);
        for (a, b) in rec.iter().zip(b.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }
}
