//! Shared oracle machinery for the integration suites: Monte-Carlo
//! estimators and the small dense linear algebra they need, written from
//! scratch on plain loops so the oracles share no numerical code with the
//! library they are checking.

#![allow(dead_code)]

use congp::Real;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Running mean and standard error via Welford's accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: Real,
    m2: Real,
}

impl Welford {
    pub fn push(&mut self, x: Real) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as Real;
        self.m2 += d * (x - self.mean);
    }

    pub fn mean(&self) -> Real {
        self.mean
    }

    pub fn se(&self) -> Real {
        let n = self.n as Real;
        (self.m2 / (n - 1.0) / n).sqrt()
    }
}

/// Plain textbook Cholesky (no jitter, no pivoting); panics on a
/// non-positive-definite input since oracle instances are built to be safe.
pub fn chol(a: ArrayView2<Real>) -> Array2<Real> {
    let n = a.nrows();
    assert_eq!(a.ncols(), n);
    let mut l = Array2::<Real>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            if i == j {
                assert!(s > 0.0, "oracle cholesky: non-PD at {i} ({s})");
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    l
}

/// Solves `L x = b` by forward substitution.
pub fn solve_lower(l: ArrayView2<Real>, b: ArrayView1<Real>) -> Array1<Real> {
    let n = b.len();
    let mut x = Array1::<Real>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for j in 0..i {
            s -= l[(i, j)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` by back substitution.
pub fn solve_lower_t(l: ArrayView2<Real>, b: ArrayView1<Real>) -> Array1<Real> {
    let n = b.len();
    let mut x = Array1::<Real>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for j in i + 1..n {
            s -= l[(j, i)] * x[j];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `A X = B` for symmetric positive-definite `A` via its Cholesky
/// factor, one column at a time.
pub fn spd_solve(a: ArrayView2<Real>, b: ArrayView2<Real>) -> Array2<Real> {
    let l = chol(a);
    let mut x = Array2::<Real>::zeros(b.dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let y = solve_lower(l.view(), col);
        x.column_mut(j).assign(&solve_lower_t(l.view(), y.view()));
    }
    x
}

/// Log-density of `N(mean, L Lᵀ)` at `x`.
pub fn log_pdf(mean: ArrayView1<Real>, l: ArrayView2<Real>, x: ArrayView1<Real>) -> Real {
    let n = mean.len() as Real;
    let diff = Array1::from_iter(x.iter().zip(mean).map(|(a, b)| a - b));
    let w = solve_lower(l, diff.view());
    let quad: Real = w.iter().map(|v| v * v).sum();
    let logdet: Real = (0..mean.len()).map(|i| l[(i, i)].ln()).sum();
    -0.5 * quad - logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
}

/// One draw of `N(mean, L Lᵀ)`.
pub fn sample(
    mean: ArrayView1<Real>,
    l: ArrayView2<Real>,
    rng: &mut ChaCha20Rng,
) -> Array1<Real> {
    let n = mean.len();
    let mut eps = Array1::<Real>::zeros(n);
    for v in eps.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    let mut out = mean.to_owned();
    for i in 0..n {
        for j in 0..=i {
            out[i] += l[(i, j)] * eps[j];
        }
    }
    out
}

/// Monte-Carlo estimate of `E_q[ln q − ln p]` between two full Gaussians
/// given as (mean, Cholesky factor) pairs; returns (mean, standard error).
pub fn mc_kl_full(
    q_mean: ArrayView1<Real>,
    q_chol: ArrayView2<Real>,
    p_mean: ArrayView1<Real>,
    p_chol: ArrayView2<Real>,
    draws: usize,
    rng: &mut ChaCha20Rng,
) -> (Real, Real) {
    let mut acc = Welford::default();
    for _ in 0..draws {
        let x = sample(q_mean, q_chol, rng);
        acc.push(log_pdf(q_mean, q_chol, x.view()) - log_pdf(p_mean, p_chol, x.view()));
    }
    (acc.mean(), acc.se())
}

/// EQ-ARD kernel matrix between row sets, written out longhand:
/// `γ exp(−½ Σ_d (x_d − x'_d)² / ℓ_d²)`, amplitude γ.
pub fn eq_kernel(
    x1: ArrayView2<Real>,
    x2: ArrayView2<Real>,
    lengthscales: &[Real],
    scale: Real,
) -> Array2<Real> {
    let mut k = Array2::<Real>::zeros((x1.nrows(), x2.nrows()));
    for i in 0..x1.nrows() {
        for j in 0..x2.nrows() {
            let mut d2 = 0.0;
            for (d, l) in lengthscales.iter().enumerate() {
                let diff = (x1[(i, d)] - x2[(j, d)]) / l;
                d2 += diff * diff;
            }
            k[(i, j)] = scale * (-0.5 * d2).exp();
        }
    }
    k
}

/// Random lower-triangular Cholesky factor with softplus-scaled positive
/// diagonal, entries O(1).
pub fn random_chol(dim: usize, rng: &mut ChaCha20Rng) -> Array2<Real> {
    let mut l = Array2::<Real>::zeros((dim, dim));
    for i in 0..dim {
        for j in 0..=i {
            let v: Real = StandardNormal.sample(rng);
            if i == j {
                l[(i, j)] = (0.5 * v).exp().ln_1p() + 0.2;
            } else {
                l[(i, j)] = 0.5 * v;
            }
        }
    }
    l
}

/// Random mean vector with entries O(1).
pub fn random_mean(dim: usize, rng: &mut ChaCha20Rng) -> Array1<Real> {
    let mut m = Array1::<Real>::zeros(dim);
    for v in m.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
    m
}
