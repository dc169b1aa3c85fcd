//! Exponentiated-quadratic (RBF) kernel with per-dimension lengthscales.
//!
//! `K(x, y) = γ · exp(−½ Σ_d ((x_d − y_d)/ℓ_d)²)`
//!
//! Hyperparameters live in log space — `θ = [ln ℓ₁, …, ln ℓ_L, ln γ]` — so
//! that unconstrained optimization and Gaussian posteriors over `θ` need no
//! boundary handling. A single shared lengthscale (`L = 1`) broadcasts over
//! all input dimensions.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::tape::{Tape, Var};
use crate::{check_finite, Error, Result, Scalar};

/// Plain-value kernel hyperparameters in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams<S: Scalar> {
    log_lengthscales: Array1<S>,
    log_scale: S,
}

impl<S: Scalar> HyperParams<S> {
    pub fn new(log_lengthscales: Array1<S>, log_scale: S) -> Result<Self> {
        if log_lengthscales.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one lengthscale is required".into(),
            ));
        }
        check_finite(log_lengthscales.iter().copied(), "log_lengthscales")?;
        check_finite([log_scale], "log_scale")?;
        Ok(HyperParams {
            log_lengthscales,
            log_scale,
        })
    }

    /// Unit lengthscales and unit scale for the given lengthscale count.
    pub fn unit(num_lengthscales: usize) -> Self {
        HyperParams {
            log_lengthscales: Array1::zeros(num_lengthscales),
            log_scale: S::zero(),
        }
    }

    /// Splits a flat parameter vector `[ln ℓ…, ln γ]` (length ≥ 2).
    pub fn from_theta(theta: ArrayView1<S>) -> Result<Self> {
        if theta.len() < 2 {
            return Err(Error::DimMismatch {
                context: "HyperParams::from_theta",
                expected: "length >= 2 (lengthscales then scale)".into(),
                got: format!("{}", theta.len()),
            });
        }
        let n = theta.len();
        HyperParams::new(theta.slice(ndarray::s![..n - 1]).to_owned(), theta[n - 1])
    }

    /// Flattens back to `[ln ℓ…, ln γ]`.
    pub fn to_theta(&self) -> Array1<S> {
        let mut out = Array1::zeros(self.log_lengthscales.len() + 1);
        out.slice_mut(ndarray::s![..self.log_lengthscales.len()])
            .assign(&self.log_lengthscales);
        out[self.log_lengthscales.len()] = self.log_scale;
        out
    }

    pub fn log_lengthscales(&self) -> ArrayView1<'_, S> {
        self.log_lengthscales.view()
    }

    pub fn log_scale(&self) -> S {
        self.log_scale
    }

    /// Signal variance `γ`.
    pub fn scale(&self) -> S {
        self.log_scale.exp()
    }

    /// Whether these lengthscales apply to `input_dim`-dimensional points.
    pub fn compatible_with(&self, input_dim: usize) -> bool {
        let l = self.log_lengthscales.len();
        l == 1 || l == input_dim
    }
}

/// Kernel hyperparameters on the tape. `log_lengthscales` is a `1×L` row
/// (`L = 1` broadcasts), `log_scale` is `1×1`.
#[derive(Clone, Copy)]
pub struct HyperVar<'t, S: Scalar> {
    pub log_lengthscales: Var<'t, S>,
    pub log_scale: Var<'t, S>,
}

impl<'t, S: Scalar> HyperVar<'t, S> {
    /// Splits a flat `(L+1)×1` parameter column `[ln ℓ…, ln γ]`.
    pub fn from_theta(theta: Var<'t, S>) -> Self {
        let (n, cols) = theta.shape();
        assert_eq!(cols, 1, "from_theta: expected a column vector");
        assert!(n >= 2, "from_theta: need at least lengthscale + scale");
        HyperVar {
            log_lengthscales: theta.slice(0, n - 1, 0, 1).t(),
            log_scale: theta.slice(n - 1, n, 0, 1),
        }
    }

    /// Lifts plain hyperparameters onto the tape as constants.
    pub fn constant(tape: &'t Tape<S>, hyper: &HyperParams<S>) -> Self {
        HyperVar {
            log_lengthscales: tape.constant(
                hyper
                    .log_lengthscales()
                    .to_owned()
                    .insert_axis(ndarray::Axis(0)),
            ),
            log_scale: tape.constant(Array2::from_elem((1, 1), hyper.log_scale())),
        }
    }

    /// Signal variance `γ` as a `1×1` node.
    pub fn scale(&self) -> Var<'t, S> {
        self.log_scale.exp()
    }
}

/// Kernel matrix `K(x, y)` on the tape: `x` is `N×D`, `y` is `M×D`, the
/// result `N×M`.
///
/// Computed via the scaled-input expansion
/// `‖a − b‖² = ‖a‖² + ‖b‖² − 2⟨a, b⟩` with squared distances clamped at zero,
/// so `K(x, x)` has an exactly-γ diagonal up to rounding in the sums.
pub fn eq_kernel_t<'t, S: Scalar>(
    hyper: &HyperVar<'t, S>,
    x: Var<'t, S>,
    y: Var<'t, S>,
) -> Var<'t, S> {
    let (_, dx) = x.shape();
    let (_, dy) = y.shape();
    assert_eq!(dx, dy, "eq_kernel: input dimension mismatch");
    let l = hyper.log_lengthscales.shape().1;
    assert!(
        l == 1 || l == dx,
        "eq_kernel: {l} lengthscales incompatible with {dx}-dimensional inputs"
    );
    let inv_ls = (-hyper.log_lengthscales).exp();
    let xs = x * inv_ls;
    let ys = y * inv_ls;
    let row_norms = (xs * xs).row_sums();
    let col_norms = (ys * ys).row_sums().t();
    let cross = xs.matmul(ys.t());
    let sq = (row_norms + col_norms - cross.scale(2.0)).clamp_min(0.0);
    hyper.scale() * sq.scale(-0.5).exp()
}

/// Plain-value [`eq_kernel_t`].
pub fn eq_kernel<S: Scalar>(
    hyper: &HyperParams<S>,
    x: ArrayView2<S>,
    y: ArrayView2<S>,
) -> Result<Array2<S>> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimMismatch {
            context: "eq_kernel",
            expected: format!("{} input columns", x.ncols()),
            got: format!("{}", y.ncols()),
        });
    }
    if !hyper.compatible_with(x.ncols()) {
        return Err(Error::DimMismatch {
            context: "eq_kernel lengthscales",
            expected: format!("1 or {} lengthscales", x.ncols()),
            got: format!("{}", hyper.log_lengthscales.len()),
        });
    }
    check_finite(x.iter().copied(), "eq_kernel x")?;
    check_finite(y.iter().copied(), "eq_kernel y")?;
    let tape = Tape::new();
    let hv = HyperVar::constant(&tape, hyper);
    let xv = tape.constant(x.to_owned());
    let yv = tape.constant(y.to_owned());
    Ok(eq_kernel_t(&hv, xv, yv).to_array())
}
