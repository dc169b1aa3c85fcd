//! Yogi adaptive optimizer: like Adam, but the second-moment estimate moves
//! additively toward each squared gradient instead of decaying toward it,
//! which keeps the effective learning rate from collapsing under sparse or
//! bursty gradients.

use ndarray::Array2;

use congp_core::Real;

use crate::{Error, Result};

/// First-moment decay.
pub const BETA1: Real = 0.9;
/// Second-moment drift rate.
pub const BETA2: Real = 0.999;
/// Denominator stabilizer.
pub const EPSILON: Real = 1e-3;

/// Per-parameter moment accumulators and the shared step counter. Shapes
/// mirror the parameter list they were created from.
#[derive(Debug, Clone)]
pub struct OptState {
    m: Vec<Array2<Real>>,
    v: Vec<Array2<Real>>,
    step: u64,
}

impl OptState {
    /// Zero-initialized accumulators shaped like `params`.
    pub fn new(params: &[Array2<Real>]) -> Self {
        OptState {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One descent update in place: `m ← β₁m + (1−β₁)g`,
/// `v ← v + (1−β₂)·sign(g²−v)⊙g²`, then `p ← p − η·m̂/(√v̂+ε)` with
/// bias-corrected `m̂`, `v̂`. The second moments stay nonnegative because `v`
/// only shrinks when it exceeds `g²`. Maximizing an objective is done by
/// passing the gradient of its negation.
pub fn yogi_step(
    params: &mut [Array2<Real>],
    grads: &[Array2<Real>],
    opt: &mut OptState,
    eta: Real,
) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidOperation(format!(
            "learning rate must be positive and finite, got {eta}"
        )));
    }
    if params.len() != grads.len() || params.len() != opt.m.len() {
        return Err(Error::InvalidOperation(format!(
            "optimizer saw {} parameters, {} gradients, state for {}",
            params.len(),
            grads.len(),
            opt.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() || p.dim() != opt.m[i].dim() {
            return Err(Error::InvalidOperation(format!(
                "parameter {i} has shape {:?}, gradient {:?}, state {:?}",
                p.dim(),
                g.dim(),
                opt.m[i].dim()
            )));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!(
                "non-finite gradient in parameter {i}"
            )));
        }
    }
    opt.step += 1;
    let bc1 = 1.0 - BETA1.powi(opt.step as i32);
    let bc2 = 1.0 - BETA2.powi(opt.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                let g2 = g * g;
                *v += (1.0 - BETA2) * (g2 - *v).signum() * g2;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= eta * m_hat / (v_hat.sqrt() + EPSILON);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut params = vec![array![[1.0, -2.0], [0.5, 3.0]]];
        let before = params.clone();
        let grads = vec![Array2::zeros((2, 2))];
        let mut opt = OptState::new(&params);
        for _ in 0..5 {
            yogi_step(&mut params, &grads, &mut opt, 0.1).unwrap();
        }
        assert_eq!(params, before);
        assert_eq!(opt.step(), 5);
    }

    #[test]
    fn first_step_matches_the_hand_trace() {
        // g = 1, η = 1: m̂ = 1, v̂ = 1, so Δ = −1/(1 + 1e-3)
        let mut params = vec![array![[0.0]]];
        let grads = vec![array![[1.0]]];
        let mut opt = OptState::new(&params);
        yogi_step(&mut params, &grads, &mut opt, 1.0).unwrap();
        assert_abs_diff_eq!(params[0][(0, 0)], -1.0 / 1.001, epsilon = 1e-9);
    }

    #[test]
    fn second_moment_shrinks_when_gradients_calm_down() {
        // a large gradient inflates v; a small one must pull it back down
        // (the additive behavior that distinguishes Yogi from Adam)
        let mut params = vec![array![[0.0]]];
        let mut opt = OptState::new(&params);
        yogi_step(&mut params, &[array![[10.0]]], &mut opt, 0.01).unwrap();
        let v_after_burst = opt.v[0][(0, 0)];
        yogi_step(&mut params, &[array![[0.1]]], &mut opt, 0.01).unwrap();
        let v_after_calm = opt.v[0][(0, 0)];
        assert!(v_after_burst > 0.0);
        assert!(
            v_after_calm < v_after_burst,
            "{v_after_calm} !< {v_after_burst}"
        );
        assert!(v_after_calm >= 0.0);
    }

    #[test]
    fn second_moments_stay_nonnegative_under_alternating_gradients() {
        let mut params = vec![array![[0.0]]];
        let mut opt = OptState::new(&params);
        for i in 0..200 {
            let g = if i % 2 == 0 { 5.0 } else { 1e-8 };
            yogi_step(&mut params, &[array![[g]]], &mut opt, 0.001).unwrap();
            assert!(opt.v[0][(0, 0)] >= 0.0, "step {i}");
        }
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_inputs() {
        let mut params = vec![array![[0.0]]];
        let mut opt = OptState::new(&params);
        assert!(yogi_step(&mut params, &[Array2::zeros((2, 1))], &mut opt, 0.1).is_err());
        assert!(yogi_step(&mut params, &[array![[Real::NAN]]], &mut opt, 0.1).is_err());
        assert!(yogi_step(&mut params, &[array![[1.0]]], &mut opt, 0.0).is_err());
        assert!(yogi_step(&mut params, &[], &mut opt, 0.1).is_err());
        // none of the failed calls advanced the step counter
        assert_eq!(opt.step(), 0);
    }
}
