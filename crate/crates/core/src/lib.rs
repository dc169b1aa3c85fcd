//! Core numerical building blocks for the `congp` continual-learning engine.
//!
//! Everything in this crate is generic over a floating-point [`Scalar`]
//! (implemented for `f32` and `f64`). The engine itself pins the concrete
//! type through the [`Real`] alias: gradient checks at the tolerances used by
//! the test suite are only meaningful in 64-bit arithmetic.
//!
//! Modules:
//!
//! * [`linalg`] — dense Cholesky factorization and triangular solves, plus the
//!   escalating-jitter policy used everywhere a kernel matrix is factored.
//! * [`tape`] — reverse-mode automatic differentiation over matrices. All
//!   differentiable math in the engine is expressed as tape programs; the
//!   plain-value entry points build a throwaway tape and read the result off
//!   the forward pass, so there is exactly one implementation of every
//!   formula.
//! * [`gaussian`] — multivariate (Cholesky-parametrized) and diagonal
//!   Gaussians: KL divergences, conditioning, auto-regressive joins, and
//!   reparametrized sampling.
//! * [`kernel`] — the exponentiated-quadratic ARD kernel over log-transformed
//!   hyperparameters.

pub mod gaussian;
pub mod kernel;
pub mod linalg;
mod scalar;
pub mod tape;

pub use scalar::Scalar;

/// Concrete scalar used by the engine crate. All production numerics run in
/// 64-bit floating point.
pub type Real = f64;

/// Errors raised by the numerical core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two operands disagree on dimensions.
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },
    /// A matrix failed Cholesky factorization even after the last jitter
    /// escalation step.
    #[error(
        "{context}: {size}x{size} matrix is not positive definite \
         (largest jitter tried: {jitter:e})"
    )]
    NotPositiveDefinite {
        context: &'static str,
        size: usize,
        jitter: f64,
    },
    /// A non-finite value (NaN or infinity) was found where finite input is
    /// required.
    #[error("non-finite value in {context}")]
    NonFinite { context: &'static str },
    /// A structurally invalid argument (negative variance clamp, empty
    /// matrix, label out of range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite<S: Scalar>(
    values: impl IntoIterator<Item = S>,
    context: &'static str,
) -> Result<()> {
    for v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite { context });
        }
    }
    Ok(())
}
