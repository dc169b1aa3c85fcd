//! Multivariate and diagonal Gaussian algebra.
//!
//! [`GaussianDist`] carries a mean and the lower Cholesky factor of its
//! covariance — the factor, never the covariance, is the working
//! representation. [`DiagGaussian`] carries a mean and per-dimension
//! log-standard-deviations.
//!
//! Each operation exists once, as a tape program (`*_t` functions over
//! [`GaussianVar`]/[`DiagGaussianVar`]); the plain-value entry points build a
//! throwaway tape over constants and read the forward value. Gradient flow
//! and plain evaluation therefore can never disagree.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::tape::{Tape, Var};
use crate::{check_finite, linalg, Error, Result, Scalar};

/// Column-vector view of a 1-D array (`n` → `n×1`).
pub fn to_col<S: Scalar>(v: ArrayView1<S>) -> Array2<S> {
    v.to_owned().insert_axis(Axis(1))
}

/// Flattens an `n×1` array back to 1-D.
pub fn col_to_vec<S: Scalar>(m: &Array2<S>) -> Array1<S> {
    assert_eq!(m.ncols(), 1, "expected a column vector, got {:?}", m.dim());
    m.column(0).to_owned()
}

// ---------------------------------------------------------------------------
// Plain value types
// ---------------------------------------------------------------------------

/// Multivariate Gaussian `N(mean, L·Lᵀ)` stored by its lower Cholesky factor
/// `L` (strictly positive diagonal, zero upper triangle).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDist<S: Scalar> {
    mean: Array1<S>,
    chol: Array2<S>,
}

impl<S: Scalar> GaussianDist<S> {
    /// Validates and wraps a mean/Cholesky pair.
    pub fn new(mean: Array1<S>, chol: Array2<S>) -> Result<Self> {
        let n = mean.len();
        if chol.dim() != (n, n) {
            return Err(Error::DimMismatch {
                context: "GaussianDist::new",
                expected: format!("{n}x{n} factor for mean of length {n}"),
                got: format!("{}x{}", chol.nrows(), chol.ncols()),
            });
        }
        check_finite(mean.iter().copied(), "GaussianDist mean")?;
        check_finite(chol.iter().copied(), "GaussianDist chol")?;
        for i in 0..n {
            if !(chol[(i, i)] > S::zero()) {
                return Err(Error::InvalidArgument(format!(
                    "Cholesky factor needs a strictly positive diagonal; entry {i} is {}",
                    chol[(i, i)]
                )));
            }
            for j in (i + 1)..n {
                if chol[(i, j)] != S::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "Cholesky factor must be lower-triangular; entry ({i},{j}) is {}",
                        chol[(i, j)]
                    )));
                }
            }
        }
        Ok(GaussianDist { mean, chol })
    }

    /// Builds from a dense covariance by plain (unjittered) factorization.
    pub fn from_cov(mean: Array1<S>, cov: ArrayView2<S>) -> Result<Self> {
        let l = linalg::cholesky(cov, "covariance factorization")?;
        GaussianDist::new(mean, l)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> ArrayView1<'_, S> {
        self.mean.view()
    }

    pub fn chol(&self) -> ArrayView2<'_, S> {
        self.chol.view()
    }

    /// Materialized covariance `L·Lᵀ` (tests and diagnostics only).
    pub fn cov(&self) -> Array2<S> {
        self.chol.dot(&self.chol.t())
    }

    /// Reparametrized sample `mean + L·noise`; deterministic in its inputs.
    pub fn sample_reparam(&self, noise: ArrayView1<S>) -> Result<Array1<S>> {
        if noise.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "sample_reparam",
                expected: format!("noise of length {}", self.dim()),
                got: format!("{}", noise.len()),
            });
        }
        Ok(&self.mean + &self.chol.dot(&noise))
    }

    /// Log-density at `x`.
    pub fn log_pdf(&self, x: ArrayView1<S>) -> S {
        assert_eq!(x.len(), self.dim(), "log_pdf: dimension mismatch");
        let n = self.dim();
        let diff = to_col((&x.to_owned() - &self.mean).view());
        let w = linalg::solve_lower(self.chol.view(), diff.view());
        let quad: S = w.iter().map(|&v| v * v).sum();
        let log_det: S = self.chol.diag().iter().map(|&d| d.ln()).sum();
        let half = crate::scalar::c::<S>(0.5);
        let ln_2pi = crate::scalar::c::<S>((2.0 * std::f64::consts::PI).ln());
        -half * quad - log_det - half * crate::scalar::c::<S>(n as f64) * ln_2pi
    }
}

/// Gaussian with diagonal covariance, stored as mean and log-standard
/// deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian<S: Scalar> {
    mean: Array1<S>,
    log_std: Array1<S>,
}

impl<S: Scalar> DiagGaussian<S> {
    pub fn new(mean: Array1<S>, log_std: Array1<S>) -> Result<Self> {
        if mean.len() != log_std.len() {
            return Err(Error::DimMismatch {
                context: "DiagGaussian::new",
                expected: format!("log_std of length {}", mean.len()),
                got: format!("{}", log_std.len()),
            });
        }
        check_finite(mean.iter().copied(), "DiagGaussian mean")?;
        check_finite(log_std.iter().copied(), "DiagGaussian log_std")?;
        Ok(DiagGaussian { mean, log_std })
    }

    /// Standard normal of the given dimension.
    pub fn standard(dim: usize) -> Self {
        DiagGaussian {
            mean: Array1::zeros(dim),
            log_std: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> ArrayView1<'_, S> {
        self.mean.view()
    }

    pub fn log_std(&self) -> ArrayView1<'_, S> {
        self.log_std.view()
    }

    pub fn std(&self) -> Array1<S> {
        self.log_std.mapv(|v| v.exp())
    }

    /// Reparametrized sample `mean + exp(log_std) ⊙ noise`.
    pub fn sample_reparam(&self, noise: ArrayView1<S>) -> Result<Array1<S>> {
        if noise.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "sample_reparam",
                expected: format!("noise of length {}", self.dim()),
                got: format!("{}", noise.len()),
            });
        }
        Ok(&self.mean + &(&self.std() * &noise))
    }

    /// KL divergence to another diagonal Gaussian.
    pub fn kl_to(&self, p: &DiagGaussian<S>) -> Result<S> {
        kl_diag(self, p)
    }
}

/// The conditional factorization produced by [`condition`]: the joint equals
/// `marginal(first k) × N(rest; coeffs·x_first + shift, cond_chol·cond_cholᵀ)`.
#[derive(Debug, Clone)]
pub struct Conditioned<S: Scalar> {
    pub marginal: GaussianDist<S>,
    pub coeffs: Array2<S>,
    pub shift: Array1<S>,
    pub cond_chol: Array2<S>,
}

// ---------------------------------------------------------------------------
// Tape-level counterparts
// ---------------------------------------------------------------------------

/// Gaussian on the tape: `mean` is an `n×1` node, `chol` an `n×n` lower
/// factor node.
#[derive(Clone, Copy)]
pub struct GaussianVar<'t, S: Scalar> {
    pub mean: Var<'t, S>,
    pub chol: Var<'t, S>,
}

impl<'t, S: Scalar> GaussianVar<'t, S> {
    /// Lifts a plain distribution onto the tape as constants.
    pub fn constant(tape: &'t Tape<S>, dist: &GaussianDist<S>) -> Self {
        GaussianVar {
            mean: tape.constant(to_col(dist.mean())),
            chol: tape.constant(dist.chol().to_owned()),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.shape().0
    }

    /// Reparametrized sample `mean + chol·noise` with constant noise.
    pub fn sample(&self, noise: ArrayView1<S>) -> Var<'t, S> {
        assert_eq!(noise.len(), self.dim(), "sample: noise length mismatch");
        let e = self.mean.tape().constant(to_col(noise));
        self.mean + self.chol.matmul(e)
    }

    /// Log-density at a tape-valued point `x` (`n×1`).
    pub fn log_pdf(&self, x: Var<'t, S>) -> Var<'t, S> {
        let n = self.dim();
        assert_eq!(x.shape(), (n, 1), "log_pdf: point shape mismatch");
        let w = self.chol.solve_lower(x - self.mean);
        let quad = (w * w).sum_all();
        let log_det = self.chol.diag_col().ln().sum_all();
        let const_term = -0.5 * (n as f64) * (2.0 * std::f64::consts::PI).ln();
        (quad.scale(-0.5) - log_det).add_const(const_term)
    }
}

/// Diagonal Gaussian on the tape: both fields are `n×1` nodes.
#[derive(Clone, Copy)]
pub struct DiagGaussianVar<'t, S: Scalar> {
    pub mean: Var<'t, S>,
    pub log_std: Var<'t, S>,
}

impl<'t, S: Scalar> DiagGaussianVar<'t, S> {
    pub fn constant(tape: &'t Tape<S>, dist: &DiagGaussian<S>) -> Self {
        DiagGaussianVar {
            mean: tape.constant(to_col(dist.mean())),
            log_std: tape.constant(to_col(dist.log_std())),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.shape().0
    }

    /// Reparametrized sample `mean + exp(log_std)⊙noise` with constant noise.
    pub fn sample(&self, noise: ArrayView1<S>) -> Var<'t, S> {
        assert_eq!(noise.len(), self.dim(), "sample: noise length mismatch");
        let e = self.mean.tape().constant(to_col(noise));
        self.mean + self.log_std.exp() * e
    }
}

/// Conditional factorization of a joint Gaussian on the tape.
#[derive(Clone, Copy)]
pub struct ConditionedVar<'t, S: Scalar> {
    pub marginal: GaussianVar<'t, S>,
    pub coeffs: Var<'t, S>,
    pub shift: Var<'t, S>,
    pub cond_chol: Var<'t, S>,
}

/// Lower-triangular reparametrization of an unconstrained square parameter:
/// softplus on the diagonal, pass-through strict lower triangle, zero upper
/// triangle (tape op).
pub fn build_chol_t<'t, S: Scalar>(raw: Var<'t, S>) -> Var<'t, S> {
    raw.tril_softplus_diag()
}

/// Plain-value [`build_chol_t`]: maps an unconstrained parameter matrix to a
/// valid Cholesky factor.
pub fn build_chol<S: Scalar>(raw: ArrayView2<S>) -> Result<Array2<S>> {
    if raw.nrows() != raw.ncols() {
        return Err(Error::DimMismatch {
            context: "build_chol",
            expected: "square matrix".into(),
            got: format!("{}x{}", raw.nrows(), raw.ncols()),
        });
    }
    check_finite(raw.iter().copied(), "build_chol input")?;
    let tape = Tape::new();
    Ok(build_chol_t(tape.constant(raw.to_owned())).to_array())
}

/// KL divergence between full-covariance Gaussians on the tape:
/// `½(tr(Σₚ⁻¹Σ_q) + (μₚ−μ_q)ᵀΣₚ⁻¹(μₚ−μ_q) − n + ln det Σₚ − ln det Σ_q)`,
/// computed entirely through triangular solves against `p.chol`.
pub fn kl_full_t<'t, S: Scalar>(q: &GaussianVar<'t, S>, p: &GaussianVar<'t, S>) -> Var<'t, S> {
    let n = q.dim();
    assert_eq!(n, p.dim(), "kl_full: dimension mismatch");
    let m = p.chol.solve_lower(q.chol);
    let trace = (m * m).sum_all();
    let d = p.chol.solve_lower(q.mean - p.mean);
    let quad = (d * d).sum_all();
    let log_det =
        (p.chol.diag_col().ln().sum_all() - q.chol.diag_col().ln().sum_all()).scale(2.0);
    (trace + quad + log_det).scale(0.5).add_const(-0.5 * n as f64)
}

/// Plain-value KL between full-covariance Gaussians.
pub fn kl_full<S: Scalar>(q: &GaussianDist<S>, p: &GaussianDist<S>) -> Result<S> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch {
            context: "kl_full",
            expected: format!("dimension {}", q.dim()),
            got: format!("dimension {}", p.dim()),
        });
    }
    let tape = Tape::new();
    let qv = GaussianVar::constant(&tape, q);
    let pv = GaussianVar::constant(&tape, p);
    Ok(kl_full_t(&qv, &pv).item())
}

/// KL divergence between diagonal Gaussians on the tape (sum of independent
/// 1-D KLs).
pub fn kl_diag_t<'t, S: Scalar>(
    q: &DiagGaussianVar<'t, S>,
    p: &DiagGaussianVar<'t, S>,
) -> Var<'t, S> {
    let n = q.dim();
    assert_eq!(n, p.dim(), "kl_diag: dimension mismatch");
    let log_ratio = (p.log_std - q.log_std).sum_all();
    let d = q.mean - p.mean;
    let var_q = q.log_std.scale(2.0).exp();
    let prec_p = p.log_std.scale(-2.0).exp();
    let quad = ((var_q + d * d) * prec_p).sum_all();
    log_ratio + quad.scale(0.5).add_const(-0.5 * n as f64)
}

/// Plain-value KL between diagonal Gaussians.
pub fn kl_diag<S: Scalar>(q: &DiagGaussian<S>, p: &DiagGaussian<S>) -> Result<S> {
    if q.dim() != p.dim() {
        return Err(Error::DimMismatch {
            context: "kl_diag",
            expected: format!("dimension {}", q.dim()),
            got: format!("dimension {}", p.dim()),
        });
    }
    let tape = Tape::new();
    let qv = DiagGaussianVar::constant(&tape, q);
    let pv = DiagGaussianVar::constant(&tape, p);
    Ok(kl_diag_t(&qv, &pv).item())
}

/// Splits a joint Gaussian after coordinate `k` on the tape. Because the
/// joint is carried by its Cholesky factor `[[L₁₁,0],[L₂₁,L₂₂]]`, the pieces
/// fall out of triangular algebra directly: marginal = (μ₁, L₁₁),
/// coeffs A = L₂₁L₁₁⁻¹, shift = μ₂ − A·μ₁, conditional factor = L₂₂.
pub fn condition_t<'t, S: Scalar>(
    joint: &GaussianVar<'t, S>,
    k: usize,
) -> ConditionedVar<'t, S> {
    let n = joint.dim();
    assert!(k > 0 && k < n, "condition split {k} outside (0, {n})");
    let l11 = joint.chol.slice(0, k, 0, k);
    let l21 = joint.chol.slice(k, n, 0, k);
    let l22 = joint.chol.slice(k, n, k, n);
    let mu1 = joint.mean.slice(0, k, 0, 1);
    let mu2 = joint.mean.slice(k, n, 0, 1);
    // A = L₂₁·L₁₁⁻¹ = (L₁₁⁻ᵀ·L₂₁ᵀ)ᵀ
    let coeffs = l11.solve_lower_t(l21.t()).t();
    let shift = mu2 - coeffs.matmul(mu1);
    ConditionedVar {
        marginal: GaussianVar { mean: mu1, chol: l11 },
        coeffs,
        shift,
        cond_chol: l22,
    }
}

/// Plain-value [`condition_t`].
pub fn condition<S: Scalar>(joint: &GaussianDist<S>, k: usize) -> Result<Conditioned<S>> {
    let n = joint.dim();
    if !(k > 0 && k < n) {
        return Err(Error::InvalidArgument(format!(
            "condition split index must satisfy 0 < k < {n}, got {k}"
        )));
    }
    let tape = Tape::new();
    let jv = GaussianVar::constant(&tape, joint);
    let cv = condition_t(&jv, k);
    Ok(Conditioned {
        marginal: GaussianDist::new(
            col_to_vec(&cv.marginal.mean.to_array()),
            cv.marginal.chol.to_array(),
        )?,
        coeffs: cv.coeffs.to_array(),
        shift: col_to_vec(&cv.shift.to_array()),
        cond_chol: cv.cond_chol.to_array(),
    })
}

/// Extends a joint Gaussian by a conditionally-Gaussian block on the tape:
/// given `prev` over `x₁` and the conditional `N(x₂; A·x₁ + m, S·Sᵀ)`,
/// returns the joint over `(x₁, x₂)`.
///
/// The joint factor is assembled in closed form as `[[Lₚ, 0], [A·Lₚ, S]]`,
/// which is exactly the Cholesky factor of
/// `[[Σₚ, ΣₚAᵀ], [AΣₚ, S·Sᵀ + AΣₚAᵀ]]` — no refactorization, no jitter, and
/// `condition` inverts it exactly.
pub fn ar_join_t<'t, S: Scalar>(
    prev: &GaussianVar<'t, S>,
    coeffs: Var<'t, S>,
    shift: Var<'t, S>,
    cond_chol: Var<'t, S>,
) -> GaussianVar<'t, S> {
    let p = prev.dim();
    let m = shift.shape().0;
    assert_eq!(coeffs.shape(), (m, p), "ar_join: coeffs shape mismatch");
    assert_eq!(shift.shape(), (m, 1), "ar_join: shift must be m×1");
    assert_eq!(cond_chol.shape(), (m, m), "ar_join: cond_chol shape mismatch");
    let tape = coeffs.tape();
    let top = prev.chol.hcat(tape.zeros(p, m));
    let bottom = coeffs.matmul(prev.chol).hcat(cond_chol);
    let chol = top.vcat(bottom);
    let mean = prev.mean.vcat(coeffs.matmul(prev.mean) + shift);
    GaussianVar { mean, chol }
}

/// Plain-value [`ar_join_t`].
pub fn ar_join<S: Scalar>(
    prev: &GaussianDist<S>,
    coeffs: ArrayView2<S>,
    shift: ArrayView1<S>,
    cond_chol: ArrayView2<S>,
) -> Result<GaussianDist<S>> {
    let p = prev.dim();
    let m = shift.len();
    if coeffs.dim() != (m, p) {
        return Err(Error::DimMismatch {
            context: "ar_join coeffs",
            expected: format!("{m}x{p}"),
            got: format!("{}x{}", coeffs.nrows(), coeffs.ncols()),
        });
    }
    if cond_chol.dim() != (m, m) {
        return Err(Error::DimMismatch {
            context: "ar_join cond_chol",
            expected: format!("{m}x{m}"),
            got: format!("{}x{}", cond_chol.nrows(), cond_chol.ncols()),
        });
    }
    // Validates triangularity/positivity of the conditional factor.
    let cond = GaussianDist::new(shift.to_owned(), cond_chol.to_owned())?;
    check_finite(coeffs.iter().copied(), "ar_join coeffs")?;

    let tape = Tape::new();
    let pv = GaussianVar::constant(&tape, prev);
    let joint = ar_join_t(
        &pv,
        tape.constant(coeffs.to_owned()),
        tape.constant(to_col(cond.mean())),
        tape.constant(cond.chol().to_owned()),
    );
    GaussianDist::new(col_to_vec(&joint.mean.to_array()), joint.chol.to_array())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn dist(mean: Array1<f64>, chol: Array2<f64>) -> GaussianDist<f64> {
        GaussianDist::new(mean, chol).unwrap()
    }

    #[test]
    fn build_chol_applies_softplus_to_diagonal_only() {
        let raw = array![[0.0, 0.0], [1.0, 0.0]];
        let l = build_chol(raw.view()).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert_abs_diff_eq!(l[(0, 0)], ln2, epsilon = 1e-12);
        assert_abs_diff_eq!(l[(1, 1)], ln2, epsilon = 1e-12);
        assert_abs_diff_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
    }

    #[test]
    fn build_chol_diagonal_is_asymptotically_identity() {
        let raw = array![[40.0_f64]];
        let l = build_chol(raw.view()).unwrap();
        assert_abs_diff_eq!(l[(0, 0)], 40.0, epsilon = 1e-12);
    }

    #[test]
    fn build_chol_ignores_upper_triangle_and_rejects_non_finite() {
        let raw = array![[0.0, 123.0], [0.0, 0.0]];
        let l = build_chol(raw.view()).unwrap();
        assert_eq!(l[(0, 1)], 0.0);
        let bad = array![[f64::NAN]];
        assert!(matches!(build_chol(bad.view()), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn kl_full_matches_hand_values() {
        // identical distributions
        let q = dist(Array1::zeros(3), Array2::eye(3));
        assert!(kl_full(&q, &q).unwrap().abs() <= 1e-12);
        // unit-covariance mean shift: KL = ½‖μ‖²
        let q = dist(array![1.0, 1.0], Array2::eye(2));
        let p = dist(Array1::zeros(2), Array2::eye(2));
        assert_abs_diff_eq!(kl_full(&q, &p).unwrap(), 1.0, epsilon = 1e-12);
        // 1-D variance mismatch: ½(4 − 1 − ln 4)
        let q = dist(array![0.0], array![[2.0]]);
        let p = dist(array![0.0], array![[1.0]]);
        assert_abs_diff_eq!(
            kl_full(&q, &p).unwrap(),
            0.5 * (4.0 - 1.0 - 4.0f64.ln()),
            epsilon = 1e-12
        );
    }

    #[test]
    fn kl_full_rejects_dimension_mismatch() {
        let q = dist(Array1::zeros(2), Array2::eye(2));
        let p = dist(Array1::zeros(3), Array2::eye(3));
        assert!(matches!(kl_full(&q, &p), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn kl_diag_matches_hand_values() {
        let q = DiagGaussian::new(array![3.0], array![0.0]).unwrap();
        let p = DiagGaussian::standard(1);
        assert_abs_diff_eq!(kl_diag(&q, &p).unwrap(), 4.5, epsilon = 1e-12);

        let q = DiagGaussian::new(array![0.0], array![1.0]).unwrap();
        let expected = 0.5 * (1.0f64.exp().powi(2) - 1.0) - 1.0;
        assert_abs_diff_eq!(kl_diag(&q, &p).unwrap(), expected, epsilon = 1e-12);

        assert_abs_diff_eq!(kl_diag(&p, &p).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn kl_diag_agrees_with_kl_full_on_diagonal_gaussians() {
        let mean_q = array![0.3, -1.2, 0.7];
        let ls_q = array![0.2, -0.4, 0.1];
        let mean_p = array![-0.5, 0.0, 2.0];
        let ls_p = array![-0.1, 0.3, -0.2];
        let dq = DiagGaussian::new(mean_q.clone(), ls_q.clone()).unwrap();
        let dp = DiagGaussian::new(mean_p.clone(), ls_p.clone()).unwrap();
        let fq = dist(mean_q, Array2::from_diag(&ls_q.mapv(f64::exp)));
        let fp = dist(mean_p, Array2::from_diag(&ls_p.mapv(f64::exp)));
        assert_abs_diff_eq!(
            kl_diag(&dq, &dp).unwrap(),
            kl_full(&fq, &fp).unwrap(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn condition_matches_hand_schur_complements() {
        // independent joint: conditioning is vacuous
        let j = dist(Array1::zeros(2), Array2::eye(2));
        let c = condition(&j, 1).unwrap();
        assert_abs_diff_eq!(c.coeffs[(0, 0)], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.shift[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(c.cond_chol[(0, 0)], 1.0, epsilon = 1e-15);

        // correlated 2×2: A = 0.5, C = 0.75
        let cov: Array2<f64> = array![[1.0, 0.5], [0.5, 1.0]];
        let j = GaussianDist::from_cov(Array1::zeros(2), cov.view()).unwrap();
        let c = condition(&j, 1).unwrap();
        assert_abs_diff_eq!(c.coeffs[(0, 0)], 0.5, epsilon = 1e-12);
        let cond_var = c.cond_chol[(0, 0)].powi(2);
        assert_abs_diff_eq!(cond_var, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn condition_rejects_degenerate_split() {
        let j = dist(Array1::zeros(2), Array2::eye(2));
        assert!(condition(&j, 0).is_err());
        assert!(condition(&j, 2).is_err());
    }

    #[test]
    fn ar_join_matches_hand_moments() {
        // prev = N(0,1), A = 0.5, m = 0.2, cond cov = 0.1
        let prev = dist(array![0.0], array![[1.0]]);
        let joint = ar_join(
            &prev,
            array![[0.5]].view(),
            array![0.2].view(),
            array![[0.1f64.sqrt()]].view(),
        )
        .unwrap();
        assert_abs_diff_eq!(joint.mean()[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(joint.mean()[1], 0.2, epsilon = 1e-15);
        let cov = joint.cov();
        assert_abs_diff_eq!(cov[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(0, 1)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(1, 0)], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(cov[(1, 1)], 0.35, epsilon = 1e-12);
    }

    #[test]
    fn ar_join_with_zero_coeffs_is_block_diagonal() {
        let prev = dist(array![1.0, -1.0], array![[1.0, 0.0], [0.3, 0.8]]);
        let joint = ar_join(
            &prev,
            Array2::zeros((1, 2)).view(),
            array![0.5].view(),
            array![[0.6]].view(),
        )
        .unwrap();
        let cov = joint.cov();
        assert_eq!(cov[(0, 2)], 0.0);
        assert_eq!(cov[(1, 2)], 0.0);
        assert_eq!(cov[(2, 0)], 0.0);
        assert_eq!(cov[(2, 1)], 0.0);
    }

    #[test]
    fn ar_join_marginal_of_first_block_is_prev() {
        let prev = dist(array![0.4, -0.2], array![[1.1, 0.0], [-0.4, 0.7]]);
        let joint = ar_join(
            &prev,
            array![[0.3, -0.1]].view(),
            array![0.9].view(),
            array![[0.5]].view(),
        )
        .unwrap();
        let c = condition(&joint, 2).unwrap();
        for (a, b) in c.marginal.mean().iter().zip(prev.mean().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        for (a, b) in c.marginal.chol().iter().zip(prev.chol().iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn condition_inverts_ar_join_exactly() {
        let prev = dist(array![0.4, -0.2], array![[1.1, 0.0], [-0.4, 0.7]]);
        let coeffs = array![[0.3, -0.1], [0.8, 0.2]];
        let shift = array![0.9, -0.3];
        let cond_chol = array![[0.5, 0.0], [0.1, 0.9]];
        let joint = ar_join(&prev, coeffs.view(), shift.view(), cond_chol.view()).unwrap();
        let c = condition(&joint, 2).unwrap();
        for (a, b) in c.coeffs.iter().zip(coeffs.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        for (a, b) in c.shift.iter().zip(shift.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        for (a, b) in c.cond_chol.iter().zip(cond_chol.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn sample_reparam_basics() {
        let d = dist(array![1.0, 2.0], array![[1.0, 0.0], [0.5, 0.8]]);
        // zero noise returns the mean
        let s = d.sample_reparam(array![0.0, 0.0].view()).unwrap();
        assert_eq!(s, array![1.0, 2.0]);
        // standard normal passes noise through
        let std = dist(Array1::zeros(2), Array2::eye(2));
        let z = array![0.7, -1.3];
        assert_eq!(std.sample_reparam(z.view()).unwrap(), z);
        // length mismatch is an error
        assert!(d.sample_reparam(array![1.0].view()).is_err());
    }

    #[test]
    fn log_pdf_matches_standard_normal_closed_form() {
        let d = dist(Array1::zeros(2), Array2::eye(2));
        let x = array![0.3, -0.4];
        let expected = -0.5 * (x[0] * x[0] + x[1] * x[1]) - (2.0 * std::f64::consts::PI).ln();
        assert_abs_diff_eq!(d.log_pdf(x.view()), expected, epsilon = 1e-12);
        // tape version agrees with the plain one
        let tape = Tape::new();
        let gv = GaussianVar::constant(&tape, &d);
        let xv = tape.constant(to_col(x.view()));
        assert_abs_diff_eq!(gv.log_pdf(xv).item(), expected, epsilon = 1e-12);
    }

    #[test]
    fn gaussian_dist_validates_factor() {
        // upper-triangle garbage
        assert!(GaussianDist::new(array![0.0, 0.0], array![[1.0, 0.5], [0.0, 1.0]]).is_err());
        // non-positive diagonal
        assert!(GaussianDist::new(array![0.0], array![[0.0]]).is_err());
        // dimension mismatch
        assert!(GaussianDist::new(array![0.0], Array2::eye(2)).is_err());
        // NaN
        assert!(GaussianDist::new(array![f64::NAN], array![[1.0]]).is_err());
    }
}
