//! Variational lower bounds: the first-task bound, the tempered continual
//! bound, and the block-diagonal and global-inducing-point ablation bounds,
//! all sharing one Monte-Carlo expected-log-likelihood estimator.
//!
//! Every bound is evaluated per hyperparameter sample on its own tape and
//! averaged in fixed sample order, so values and gradients are bitwise
//! reproducible for a given noise draw regardless of thread count. The
//! analytic hyperparameter KL lives on a separate small tape and is folded in
//! with weight −β.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use congp_core::gaussian::{
    col_to_vec, kl_diag_t, kl_full_t, to_col, DiagGaussian, DiagGaussianVar, GaussianVar,
};
use congp_core::kernel::{eq_kernel_t, HyperParams, HyperVar};
use congp_core::tape::{Tape, Var};
use congp_core::Real;

use crate::model::{
    block_from_params, lift_block, lift_state_joint, predictive_marginals_t,
    prior_conditional_t, variational_joint_t, BlockVars, ContinualState, Coupling,
};
use crate::{Error, Result};

/// Settings shared by all bound evaluations.
#[derive(Debug, Clone, Copy)]
pub struct ElboConfig {
    /// Tempering factor on the hyperparameter KL (and only on it).
    pub beta: Real,
    /// Monte-Carlo samples of θ per evaluation.
    pub num_theta_samples: usize,
    /// Likelihood scale N_t / B compensating for mini-batching.
    pub batch_scale: Real,
}

impl ElboConfig {
    pub fn new(beta: Real, num_theta_samples: usize, batch_scale: Real) -> Result<Self> {
        let cfg = ElboConfig { beta, num_theta_samples, batch_scale };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidOperation(format!(
                "beta must be positive and finite, got {}",
                self.beta
            )));
        }
        if self.num_theta_samples == 0 {
            return Err(Error::InvalidOperation(
                "need at least one hyperparameter sample".into(),
            ));
        }
        if !(self.batch_scale > 0.0 && self.batch_scale.is_finite()) {
            return Err(Error::InvalidOperation(format!(
                "batch_scale must be positive and finite, got {}",
                self.batch_scale
            )));
        }
        Ok(())
    }
}

/// Which bound applies to a given state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundKind {
    /// Single block, nothing completed: the first-task bound.
    FirstTask,
    /// Two or more blocks with auto-regressive coupling.
    Continual,
    /// Two or more blocks with block-diagonal coupling.
    BlockDiagonal,
    /// Single (replaced) block after at least one completed task.
    Global,
}

/// Chooses the bound a state's shape calls for.
pub fn classify_bound(state: &ContinualState) -> Result<BoundKind> {
    if state.num_blocks() == 0 {
        return Err(Error::InvalidOperation(
            "state has no inducing blocks to bound".into(),
        ));
    }
    Ok(if state.num_blocks() == 1 {
        if state.completed_tasks() == 0 {
            BoundKind::FirstTask
        } else {
            BoundKind::Global
        }
    } else if state.coupling() == Coupling::BlockDiagonal {
        BoundKind::BlockDiagonal
    } else {
        BoundKind::Continual
    })
}

/// Additive pieces of a bound evaluation:
/// `elbo = expected_loglik − u_divergence + correction − beta·hyper_kl`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub elbo: Real,
    /// Scaled Monte-Carlo expected log-likelihood.
    pub expected_loglik: Real,
    /// θ-averaged sum over classes of the inducing-output divergence.
    pub u_divergence: Real,
    /// Hyperparameter KL against the previous posterior (0 under point
    /// hyperparameters).
    pub hyper_kl: Real,
    /// Global-variant density-ratio correction (0 elsewhere).
    pub correction: Real,
}

// ---------------------------------------------------------------------------
// Trainable-parameter bundle and noise layout
// ---------------------------------------------------------------------------

/// The live degrees of freedom during one task: the unfrozen block's
/// parameters and the hyperparameter posterior. Gradient vectors follow the
/// flattening order [z, m, s_raw per class…, hyper_mean, hyper_log_std].
#[derive(Debug, Clone)]
pub(crate) struct LiveParams {
    pub z: Array2<Real>,
    pub m: Array2<Real>,
    pub s_raw: Vec<Array2<Real>>,
    pub hyper_mean: Array2<Real>,
    pub hyper_log_std: Array2<Real>,
}

impl LiveParams {
    pub(crate) fn from_state(state: &ContinualState) -> Result<Self> {
        let block = state.last_block()?;
        Ok(LiveParams {
            z: block.z().to_owned(),
            m: block.m().to_owned(),
            s_raw: (0..state.num_classes()).map(|k| block.s_raw(k).to_owned()).collect(),
            hyper_mean: to_col(state.hyper_q().mean()),
            hyper_log_std: to_col(state.hyper_q().log_std()),
        })
    }

    pub(crate) fn write_to_state(&self, state: &mut ContinualState) -> Result<()> {
        state
            .last_block_mut()?
            .set_params(self.z.clone(), self.m.clone(), self.s_raw.clone())?;
        state.set_hyper_q(DiagGaussian::new(
            col_to_vec(&self.hyper_mean),
            col_to_vec(&self.hyper_log_std),
        )?)?;
        Ok(())
    }

    pub(crate) fn flatten(&self) -> Vec<Array2<Real>> {
        let mut out = Vec::with_capacity(self.s_raw.len() + 4);
        out.push(self.z.clone());
        out.push(self.m.clone());
        out.extend(self.s_raw.iter().cloned());
        out.push(self.hyper_mean.clone());
        out.push(self.hyper_log_std.clone());
        out
    }

    pub(crate) fn apply_flat(&mut self, parts: &[Array2<Real>]) {
        let k = self.s_raw.len();
        assert_eq!(parts.len(), k + 4, "flattened parameter count mismatch");
        self.z = parts[0].clone();
        self.m = parts[1].clone();
        for (dst, src) in self.s_raw.iter_mut().zip(&parts[2..2 + k]) {
            *dst = src.clone();
        }
        self.hyper_mean = parts[2 + k].clone();
        self.hyper_log_std = parts[3 + k].clone();
    }
}

/// All standard-normal draws a bound evaluation consumes, pre-drawn so that
/// evaluations are pure functions of their inputs. Per sample `s` the draw
/// order is: θ (H values; skipped entirely under point hyperparameters),
/// then the likelihood noise (B×K row-major), then — depending on the bound —
/// the frozen-history draws (P×K), or the live draws (M×K) followed by the
/// previous-block draws (P×K) for the global correction.
#[derive(Debug, Clone)]
pub struct ElboNoise {
    /// S×H hyperparameter noise.
    pub theta_eps: Array2<Real>,
    /// Per sample: B×K latent-function noise.
    pub f_eps: Vec<Array2<Real>>,
    /// Per sample: P×K draws of the frozen history (block-diagonal bound).
    pub u_hist_eps: Option<Vec<Array2<Real>>>,
    /// Per sample: M×K draws of the live inducing outputs (global bound).
    pub u_live_eps: Option<Vec<Array2<Real>>>,
    /// Per sample: P×K nested draws of the previous block (global bound).
    pub u_prev_eps: Option<Vec<Array2<Real>>>,
}

impl ElboNoise {
    /// Draws everything the state's bound will consume from `rng`.
    pub fn draw(
        state: &ContinualState,
        cfg: &ElboConfig,
        batch_rows: usize,
        rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        Self::build(state, cfg, batch_rows, Some(rng))
    }

    /// All-zero noise of the right layout (deterministic evaluations).
    pub fn zeros(state: &ContinualState, cfg: &ElboConfig, batch_rows: usize) -> Result<Self> {
        Self::build(state, cfg, batch_rows, None)
    }

    fn build(
        state: &ContinualState,
        cfg: &ElboConfig,
        batch_rows: usize,
        mut rng: Option<&mut ChaCha20Rng>,
    ) -> Result<Self> {
        cfg.validate()?;
        let kind = classify_bound(state)?;
        let samples = cfg.num_theta_samples;
        let h = state.hyper_dim();
        let k = state.num_classes();
        let m_live = state.last_block()?.num_inducing();
        let hist_rows: usize = state.blocks()[..state.num_blocks() - 1]
            .iter()
            .map(|b| b.num_inducing())
            .sum();
        let prev_rows = state.replaced_block().map(|b| b.num_inducing());

        let fill = |arr: &mut Array2<Real>, rng: &mut Option<&mut ChaCha20Rng>| {
            if let Some(r) = rng.as_deref_mut() {
                for v in arr.iter_mut() {
                    *v = StandardNormal.sample(r);
                }
            }
        };

        let mut theta_eps = Array2::zeros((samples, h));
        let mut f_eps = Vec::with_capacity(samples);
        let mut u_hist = Vec::new();
        let mut u_live = Vec::new();
        let mut u_prev = Vec::new();
        for s_ix in 0..samples {
            if !state.point_hypers() {
                let mut row = Array2::zeros((1, h));
                fill(&mut row, &mut rng);
                theta_eps.slice_mut(s![s_ix..s_ix + 1, ..]).assign(&row);
            }
            let mut f = Array2::zeros((batch_rows, k));
            fill(&mut f, &mut rng);
            f_eps.push(f);
            match kind {
                BoundKind::BlockDiagonal => {
                    let mut e = Array2::zeros((hist_rows, k));
                    fill(&mut e, &mut rng);
                    u_hist.push(e);
                }
                BoundKind::Global => {
                    if let Some(p) = prev_rows {
                        let mut a = Array2::zeros((m_live, k));
                        fill(&mut a, &mut rng);
                        u_live.push(a);
                        let mut b = Array2::zeros((p, k));
                        fill(&mut b, &mut rng);
                        u_prev.push(b);
                    }
                }
                _ => {}
            }
        }
        Ok(ElboNoise {
            theta_eps,
            f_eps,
            u_hist_eps: (!u_hist.is_empty()).then_some(u_hist),
            u_live_eps: (!u_live.is_empty()).then_some(u_live),
            u_prev_eps: (!u_prev.is_empty()).then_some(u_prev),
        })
    }
}

// ---------------------------------------------------------------------------
// The shared Monte-Carlo machinery
// ---------------------------------------------------------------------------

/// Scaled log-softmax likelihood term on the tape: one reparametrized latent
/// draw per point per class, stable log-sum-exp via a constant row shift
/// (exact in value and gradient), summed over the batch and multiplied by
/// `batch_scale`.
fn loglik_term<'t>(
    pairs: &[(Var<'t, Real>, Var<'t, Real>)],
    y: ArrayView1<usize>,
    f_eps: &Array2<Real>,
    batch_scale: Real,
) -> Result<Var<'t, Real>> {
    let num_classes = pairs.len();
    let rows = y.len();
    if f_eps.dim() != (rows, num_classes) {
        return Err(Error::InvalidOperation(format!(
            "likelihood noise is {:?}, expected ({rows}, {num_classes})",
            f_eps.dim()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidOperation(format!(
            "label {bad} out of range [0, {num_classes})"
        )));
    }
    let tape = pairs[0].0.tape();
    let mut logits: Option<Var<'t, Real>> = None;
    for (k, (mean, var)) in pairs.iter().enumerate() {
        let eps = tape.constant(to_col(f_eps.column(k)));
        let col = *mean + var.sqrt() * eps;
        logits = Some(match logits {
            Some(l) => l.hcat(col),
            None => col,
        });
    }
    let logits = logits.expect("at least two classes");
    let logit_values = logits.to_array();
    let shift = Array2::from_shape_fn((rows, 1), |(i, _)| {
        logit_values
            .row(i)
            .iter()
            .copied()
            .fold(Real::NEG_INFINITY, Real::max)
    });
    let shifted = logits - tape.constant(shift);
    let lse = shifted.exp().row_sums().ln();
    let mut onehot = Array2::zeros((rows, num_classes));
    for (i, &label) in y.iter().enumerate() {
        onehot[(i, label)] = 1.0;
    }
    let picked = (shifted * tape.constant(onehot)).row_sums();
    Ok((picked - lse).sum_all().scale(batch_scale))
}

/// Host-side draw of the frozen history under its own (θ-independent,
/// block-diagonal) variational joint for class `k`.
fn sample_frozen_history(
    state: &ContinualState,
    class_k: usize,
    eps: ArrayView1<Real>,
) -> Array1<Real> {
    let mut out = Array1::zeros(eps.len());
    let mut offset = 0;
    for block in &state.blocks()[..state.num_blocks() - 1] {
        let rows = block.num_inducing();
        let l = block.class_chol(class_k);
        let seg = eps.slice(s![offset..offset + rows]);
        let v = &block.class_mean(class_k) + &l.dot(&seg);
        out.slice_mut(s![offset..offset + rows]).assign(&v);
        offset += rows;
    }
    out
}

struct SampleOut {
    out: Real,
    loglik: Real,
    u_div: Real,
    corr: Real,
    grads: Option<Vec<Array2<Real>>>,
}

/// One Monte-Carlo sample of the bound (everything except the analytic
/// hyperparameter KL) on its own tape, with optional gradients in flattening
/// order.
#[allow(clippy::too_many_arguments)]
fn sample_pass(
    state: &ContinualState,
    live: &LiveParams,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    noise: &ElboNoise,
    s_ix: usize,
    kind: BoundKind,
    zero_cross: bool,
    want_grads: bool,
) -> Result<SampleOut> {
    let num_classes = state.num_classes();
    let n_blocks = state.num_blocks();
    let tape = Tape::new();

    let zv = tape.param(live.z.clone());
    let mv = tape.param(live.m.clone());
    let s_vars: Vec<Var<'_, Real>> =
        live.s_raw.iter().map(|a| tape.param(a.clone())).collect();
    let hm = tape.param(live.hyper_mean.clone());
    let hls = tape.param(live.hyper_log_std.clone());

    let q_theta = DiagGaussianVar { mean: hm, log_std: hls };
    let theta = q_theta.sample(noise.theta_eps.row(s_ix));
    let hyper = HyperVar::from_theta(theta);

    let mut blocks: Vec<BlockVars<'_>> = state.blocks()[..n_blocks - 1]
        .iter()
        .map(|b| lift_block(&tape, b))
        .collect();
    blocks.push(block_from_params(zv, mv, &s_vars));
    let live_idx = blocks.len() - 1;
    let joint = variational_joint_t(&hyper, &blocks, state.coupling(), zero_cross)?;

    let xv = tape.constant(x.to_owned());
    let pairs = predictive_marginals_t(&hyper, joint.z_all, &joint.classes, xv)?;
    let loglik = loglik_term(&pairs, y, &noise.f_eps[s_ix], cfg.batch_scale)?;

    let live_q = |k: usize| GaussianVar {
        mean: blocks[live_idx].classes[k].m,
        chol: blocks[live_idx].classes[k].chol,
    };
    let m_live = live.z.nrows();

    fn acc_var<'t>(acc: &mut Option<Var<'t, Real>>, term: Var<'t, Real>) {
        *acc = Some(match *acc {
            Some(v) => v + term,
            None => term,
        });
    }
    let mut u_div: Option<Var<'_, Real>> = None;
    let mut corr: Option<Var<'_, Real>> = None;

    match kind {
        BoundKind::FirstTask | BoundKind::Global => {
            // divergence against the full prior N(0, K_{Z_t,Z_t}(θ))
            let k_zz = eq_kernel_t(&hyper, zv, zv);
            let l_zz = k_zz.cholesky("inducing kernel")?;
            let target = GaussianVar { mean: tape.zeros(m_live, 1), chol: l_zz };
            for k in 0..num_classes {
                acc_var(&mut u_div, kl_full_t(&live_q(k), &target));
            }
            if kind == BoundKind::Global {
                let rep = state.replaced_block().ok_or_else(|| {
                    Error::InvalidOperation(
                        "the global bound needs the previous task's inducing block \
                         snapshot"
                            .into(),
                    )
                })?;
                let (u_live_eps, u_prev_eps) = match (&noise.u_live_eps, &noise.u_prev_eps) {
                    (Some(a), Some(b)) => (&a[s_ix], &b[s_ix]),
                    _ => {
                        return Err(Error::InvalidOperation(
                            "noise draw is missing the global-bound components".into(),
                        ))
                    }
                };
                let prev_rows = rep.num_inducing();
                let z_prev = tape.constant(rep.z().to_owned());
                // p(u_{t−1} | u_t, θ) conditions the previous block on the live one
                let pc = prior_conditional_t(&hyper, z_prev, zv, false)?;
                let k_pp = eq_kernel_t(&hyper, z_prev, z_prev);
                let l_pp = k_pp.cholesky("previous inducing kernel")?;
                let prior_prev = GaussianVar { mean: tape.zeros(prev_rows, 1), chol: l_pp };
                for k in 0..num_classes {
                    let u_t = live_q(k).sample(u_live_eps.column(k));
                    let e2 = tape.constant(to_col(u_prev_eps.column(k)));
                    let u_prev = pc.coeffs.matmul(u_t) + pc.cond_chol.matmul(e2);
                    let q_prev = GaussianVar {
                        mean: tape.constant(to_col(rep.class_mean(k).view())),
                        chol: tape.constant(rep.class_chol(k)),
                    };
                    let term = q_prev.log_pdf(u_prev) - prior_prev.log_pdf(u_prev);
                    acc_var(&mut corr, term);
                }
            }
        }
        BoundKind::Continual => {
            let prior = joint.live_prior.as_ref().expect("two or more blocks");
            let target =
                GaussianVar { mean: tape.zeros(m_live, 1), chol: prior.cond_chol };
            for k in 0..num_classes {
                acc_var(&mut u_div, kl_full_t(&live_q(k), &target));
            }
        }
        BoundKind::BlockDiagonal => {
            let prior = joint.live_prior.as_ref().expect("two or more blocks");
            let eps = noise.u_hist_eps.as_ref().ok_or_else(|| {
                Error::InvalidOperation(
                    "noise draw is missing the frozen-history components".into(),
                )
            })?;
            for k in 0..num_classes {
                let u_hist = sample_frozen_history(state, k, eps[s_ix].column(k));
                let u_const = tape.constant(to_col(u_hist.view()));
                let target = GaussianVar {
                    mean: prior.coeffs.matmul(u_const),
                    chol: prior.cond_chol,
                };
                acc_var(&mut u_div, kl_full_t(&live_q(k), &target));
            }
        }
    }

    let u_div = u_div.expect("at least two classes");
    let out = match corr {
        Some(c) => loglik - u_div + c,
        None => loglik - u_div,
    };

    let out_val = out.item();
    if !out_val.is_finite() {
        return Err(Error::Training(format!(
            "non-finite bound value {out_val} at hyperparameter sample {s_ix}"
        )));
    }

    let grads = if want_grads {
        let mut g = out.backward();
        let mut vec = Vec::with_capacity(s_vars.len() + 4);
        let mut take = |v: Var<'_, Real>, dim: (usize, usize)| {
            g.take(v).unwrap_or_else(|| Array2::zeros(dim))
        };
        vec.push(take(zv, live.z.dim()));
        vec.push(take(mv, live.m.dim()));
        for (v, a) in s_vars.iter().zip(&live.s_raw) {
            vec.push(take(*v, a.dim()));
        }
        vec.push(take(hm, live.hyper_mean.dim()));
        vec.push(take(hls, live.hyper_log_std.dim()));
        Some(vec)
    } else {
        None
    };

    Ok(SampleOut {
        out: out_val,
        loglik: loglik.item(),
        u_div: u_div.item(),
        corr: corr.map(|c| c.item()).unwrap_or(0.0),
        grads,
    })
}

/// Analytic hyperparameter KL on its own tape, with optional gradients for
/// (hyper_mean, hyper_log_std).
fn hyper_kl_term(
    live: &LiveParams,
    target: &DiagGaussian<Real>,
    want_grads: bool,
) -> (Real, Option<(Array2<Real>, Array2<Real>)>) {
    let tape = Tape::new();
    let hm = tape.param(live.hyper_mean.clone());
    let hls = tape.param(live.hyper_log_std.clone());
    let q = DiagGaussianVar { mean: hm, log_std: hls };
    let t = DiagGaussianVar::constant(&tape, target);
    let kl = kl_diag_t(&q, &t);
    let value = kl.item();
    let grads = want_grads.then(|| {
        let mut g = kl.backward();
        (
            g.take(hm).unwrap_or_else(|| Array2::zeros(live.hyper_mean.dim())),
            g.take(hls).unwrap_or_else(|| Array2::zeros(live.hyper_log_std.dim())),
        )
    });
    (value, grads)
}

/// Unified bound evaluation over explicit noise. Gradients (when requested)
/// come back in the flattening order [z, m, s_raw…, hyper_mean,
/// hyper_log_std], averaged over samples in fixed index order so the result
/// is bitwise independent of the parallel schedule.
#[allow(clippy::too_many_arguments)]
pub(crate) fn elbo_parts(
    state: &ContinualState,
    live: &LiveParams,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    noise: &ElboNoise,
    kind: BoundKind,
    zero_cross: bool,
    want_grads: bool,
    parallel: bool,
) -> Result<(ElboParts, Option<Vec<Array2<Real>>>)> {
    cfg.validate()?;
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::InvalidOperation(format!(
            "batch of {} points with {} labels",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() != state.input_dim() {
        return Err(Error::InvalidOperation(format!(
            "batch points have {} columns, state expects {}",
            x.ncols(),
            state.input_dim()
        )));
    }
    let samples = cfg.num_theta_samples;
    if noise.theta_eps.dim() != (samples, state.hyper_dim()) || noise.f_eps.len() != samples {
        return Err(Error::InvalidOperation(
            "noise layout disagrees with the configuration".into(),
        ));
    }
    match kind {
        BoundKind::FirstTask => {
            if state.num_blocks() != 1 || state.completed_tasks() != 0 {
                return Err(Error::InvalidOperation(
                    "the first-task bound requires exactly one block and no completed \
                     tasks"
                        .into(),
                ));
            }
        }
        BoundKind::Continual | BoundKind::BlockDiagonal => {
            if state.num_blocks() < 2 {
                return Err(Error::InvalidOperation(
                    "the continual bound requires at least two inducing blocks".into(),
                ));
            }
            if state.blocks()[..state.num_blocks() - 1].iter().any(|b| !b.frozen()) {
                return Err(Error::InvalidOperation(
                    "earlier inducing blocks must be frozen".into(),
                ));
            }
        }
        BoundKind::Global => {
            if state.num_blocks() != 1 {
                return Err(Error::InvalidOperation(
                    "the global bound keeps a single inducing block".into(),
                ));
            }
        }
    }

    let run = |s_ix: usize| {
        sample_pass(state, live, x, y, cfg, noise, s_ix, kind, zero_cross, want_grads)
    };
    let results: Vec<SampleOut> = if parallel {
        (0..samples).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..samples).map(run).collect::<Result<_>>()?
    };

    let inv = 1.0 / samples as Real;
    let mut out = 0.0;
    let mut loglik = 0.0;
    let mut u_div = 0.0;
    let mut corr = 0.0;
    let mut grads: Option<Vec<Array2<Real>>> = None;
    for r in results {
        out += r.out;
        loglik += r.loglik;
        u_div += r.u_div;
        corr += r.corr;
        if let Some(g) = r.grads {
            grads = Some(match grads {
                None => g,
                Some(mut acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        *a += b;
                    }
                    acc
                }
            });
        }
    }
    out *= inv;
    loglik *= inv;
    u_div *= inv;
    corr *= inv;
    if let Some(acc) = grads.as_mut() {
        for a in acc.iter_mut() {
            a.mapv_inplace(|v| v * inv);
        }
    }

    let (hyper_kl, hyper_grads) = if state.point_hypers() {
        (0.0, None)
    } else {
        hyper_kl_term(live, state.hyper_prev(), want_grads)
    };
    let elbo = out - cfg.beta * hyper_kl;
    if let (Some(acc), Some((gm, gls))) = (grads.as_mut(), hyper_grads) {
        let n = acc.len();
        acc[n - 2].scaled_add(-cfg.beta, &gm);
        acc[n - 1].scaled_add(-cfg.beta, &gls);
    }

    Ok((
        ElboParts {
            elbo,
            expected_loglik: loglik,
            u_divergence: u_div,
            hyper_kl,
            correction: corr,
        },
        grads,
    ))
}

fn run_bound(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    rng: &mut ChaCha20Rng,
    kind: BoundKind,
) -> Result<ElboParts> {
    let live = LiveParams::from_state(state)?;
    let noise = ElboNoise::draw(state, cfg, x.nrows(), rng)?;
    Ok(elbo_parts(state, &live, x, y, cfg, &noise, kind, false, false, false)?.0)
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Monte-Carlo expected log-likelihood under explicit hyperparameter samples
/// and latent noise: per sample, predictive marginals on the batch, one
/// reparametrized latent draw per point per class, stable log-softmax at the
/// true label; averaged over samples and multiplied by `batch_scale` times
/// the summed batch contribution.
pub fn expected_loglik(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    theta_samples: &[HyperParams<Real>],
    f_noise: &[Array2<Real>],
    batch_scale: Real,
) -> Result<Real> {
    if theta_samples.is_empty() || theta_samples.len() != f_noise.len() {
        return Err(Error::InvalidOperation(
            "need one latent-noise matrix per hyperparameter sample".into(),
        ));
    }
    if !(batch_scale > 0.0 && batch_scale.is_finite()) {
        return Err(Error::InvalidOperation(format!(
            "batch_scale must be positive and finite, got {batch_scale}"
        )));
    }
    if x.nrows() == 0 || x.nrows() != y.len() {
        return Err(Error::InvalidOperation(format!(
            "batch of {} points with {} labels",
            x.nrows(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (theta, eps) in theta_samples.iter().zip(f_noise) {
        let tape = Tape::new();
        let (hyper, joint) = lift_state_joint(&tape, state, theta)?;
        let xv = tape.constant(x.to_owned());
        let pairs = predictive_marginals_t(&hyper, joint.z_all, &joint.classes, xv)?;
        total += loglik_term(&pairs, y, eps, batch_scale)?.item();
    }
    Ok(total / theta_samples.len() as Real)
}

/// Divergence of the live block's variational distribution from the prior
/// conditional for class `class_k`: KL[N(m_t, Σ_t) ‖ N(0, C_t(θ))]. The
/// history-dependent mean shifts cancel inside the bound, so no history
/// values enter — the operation signature takes none.
pub fn dt_kl(state: &ContinualState, theta: &HyperParams<Real>, class_k: usize) -> Result<Real> {
    if state.num_blocks() < 2 {
        return Err(Error::InvalidOperation(
            "the conditional divergence is defined from the second task on".into(),
        ));
    }
    if class_k >= state.num_classes() {
        return Err(Error::InvalidOperation(format!(
            "class {class_k} out of range [0, {})",
            state.num_classes()
        )));
    }
    let block = state.last_block()?;
    let tape = Tape::new();
    let hyper = HyperVar::constant(&tape, theta);
    let z_prev = tape.constant(state.frozen_z_stack().expect("two or more blocks"));
    let z_live = tape.constant(block.z().to_owned());
    let pc = prior_conditional_t(&hyper, z_live, z_prev, false)?;
    let q = GaussianVar {
        mean: tape.constant(to_col(block.class_mean(class_k).view())),
        chol: tape.constant(block.class_chol(class_k)),
    };
    let target = GaussianVar {
        mean: tape.zeros(block.num_inducing(), 1),
        chol: pc.cond_chol,
    };
    Ok(kl_full_t(&q, &target).item())
}

/// First-task bound: scaled expected log-likelihood minus β times the
/// hyperparameter KL against the prior, minus the θ-averaged divergence of
/// each class's q(u₁) from N(0, K_{Z₁,Z₁}(θ)).
pub fn elbo_first(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    rng: &mut ChaCha20Rng,
) -> Result<ElboParts> {
    if classify_bound(state)? != BoundKind::FirstTask {
        return Err(Error::InvalidOperation(
            "the first-task bound requires exactly one block and no completed tasks"
                .into(),
        ));
    }
    run_bound(state, x, y, cfg, rng, BoundKind::FirstTask)
}

/// Continual bound for the auto-regressive parametrization: scaled expected
/// log-likelihood minus β·KL[q_t(θ)‖q_{t−1}(θ)] minus the θ-averaged
/// per-class conditional divergence.
pub fn elbo_continual(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    rng: &mut ChaCha20Rng,
) -> Result<ElboParts> {
    if classify_bound(state)? != BoundKind::Continual {
        return Err(Error::InvalidOperation(
            "the continual bound requires two or more auto-regressively coupled blocks"
                .into(),
        ));
    }
    run_bound(state, x, y, cfg, rng, BoundKind::Continual)
}

/// Continual bound for the block-diagonal ablation: the variational
/// conditional drops the cross-task coefficients, so its divergence target
/// N(A_t·u_<t, C_t) retains a sampled history term.
pub fn elbo_block_diag(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    rng: &mut ChaCha20Rng,
) -> Result<ElboParts> {
    if classify_bound(state)? != BoundKind::BlockDiagonal {
        return Err(Error::InvalidOperation(
            "the block-diagonal bound requires two or more decoupled blocks".into(),
        ));
    }
    run_bound(state, x, y, cfg, rng, BoundKind::BlockDiagonal)
}

/// Global-inducing-point ablation bound: a single replaced block, divergence
/// against the full prior, plus the nested density-ratio correction
/// E[ln q(u_{t−1}) − ln p(u_{t−1}|θ)] with u_{t−1} drawn from the prior
/// conditional given a reparametrized u_t draw. Before any task completes it
/// coincides with the first-task bound exactly.
pub fn elbo_global(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    rng: &mut ChaCha20Rng,
) -> Result<ElboParts> {
    let kind = classify_bound(state)?;
    if !matches!(kind, BoundKind::FirstTask | BoundKind::Global) {
        return Err(Error::InvalidOperation(
            "the global bound keeps a single inducing block".into(),
        ));
    }
    run_bound(state, x, y, cfg, rng, kind)
}

/// Bound evaluation over explicit pre-drawn noise (reproducibility tooling:
/// the same noise always yields the same value, and components the bound does
/// not consume are ignored).
pub fn elbo_with_noise(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    noise: &ElboNoise,
) -> Result<ElboParts> {
    let kind = classify_bound(state)?;
    let live = LiveParams::from_state(state)?;
    Ok(elbo_parts(state, &live, x, y, cfg, noise, kind, false, false, false)?.0)
}

/// Bound value and gradients for the state's own bound kind. Gradients come
/// back in the order [z, m, s_raw per class…, hyper_mean, hyper_log_std].
pub fn elbo_and_grads(
    state: &ContinualState,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    rng: &mut ChaCha20Rng,
) -> Result<(ElboParts, Vec<Array2<Real>>)> {
    let kind = classify_bound(state)?;
    let live = LiveParams::from_state(state)?;
    let noise = ElboNoise::draw(state, cfg, x.nrows(), rng)?;
    let (parts, grads) =
        elbo_parts(state, &live, x, y, cfg, &noise, kind, false, true, false)?;
    Ok((parts, grads.expect("gradients requested")))
}

/// Training entry point: explicit live parameters and noise, optional
/// sample-level parallelism (bitwise identical to the sequential path).
pub(crate) fn elbo_training_step(
    state: &ContinualState,
    live: &LiveParams,
    x: ArrayView2<Real>,
    y: ArrayView1<usize>,
    cfg: &ElboConfig,
    noise: &ElboNoise,
    parallel: bool,
) -> Result<(ElboParts, Vec<Array2<Real>>)> {
    let kind = classify_bound(state)?;
    let (parts, grads) =
        elbo_parts(state, live, x, y, cfg, noise, kind, false, true, parallel)?;
    Ok((parts, grads.expect("gradients requested")))
}
