//! Model state and Gaussian-process algebra: per-task inducing blocks, the
//! prior conditional between inducing sets, the closed-form auto-regressive
//! variational joint over all inducing outputs, and predictive marginals of
//! the latent functions.
//!
//! Everything numerical is written once as a tape program (`*_t` functions);
//! the plain public operations lift their inputs as constants onto a
//! throwaway tape and read values off the forward pass. The objective module
//! reuses the same tape programs with live parameter leaves, so training
//! gradients and plain evaluation can never diverge.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use congp_core::gaussian::{
    ar_join_t, build_chol, build_chol_t, to_col, DiagGaussian, GaussianDist, GaussianVar,
};
use congp_core::kernel::{eq_kernel_t, HyperParams, HyperVar};
use congp_core::tape::{Tape, Var};
use congp_core::Real;

use crate::{Error, Result};

/// Raw-parameter diagonal value that `build_chol` maps to exactly 1, i.e.
/// softplus⁻¹(1); fresh blocks start at identity covariance.
pub const RAW_UNIT_DIAG: Real = 0.541_324_854_612_918_4; // ln(e − 1)

/// Negative predictive variances beyond this tolerance indicate a numerical
/// failure rather than benign round-off.
pub const VARIANCE_FLOOR_TOL: Real = -1e-8;
/// Clamp applied to predictive variances after the tolerance check.
pub const VARIANCE_CLAMP: Real = 1e-12;

/// Inverse of the covariance-factor parametrization: raw parameters whose
/// `build_chol` image is the given lower-triangular factor (softplus⁻¹ on the
/// diagonal, identity below it). Panics on non-positive diagonal entries.
pub fn raw_from_chol(l: ndarray::ArrayView2<Real>) -> Array2<Real> {
    let n = l.nrows();
    assert_eq!(n, l.ncols(), "factor must be square");
    let mut raw = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            raw[(i, j)] = l[(i, j)];
        }
        let d = l[(i, i)];
        assert!(d > 0.0, "factor diagonal must be positive, got {d}");
        // softplus⁻¹(d) = ln(eᵈ − 1), written via exp_m1 for small d
        raw[(i, i)] = d.exp_m1().ln();
    }
    raw
}

/// How the variational conditional couples a task's inducing outputs to the
/// preceding tasks': auto-regressively through the prior coefficients, or not
/// at all (the block-diagonal ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    AutoRegressive,
    BlockDiagonal,
}

// ---------------------------------------------------------------------------
// Inducing blocks
// ---------------------------------------------------------------------------

/// One task's variational parameters: inducing inputs `Z` (M×D), per-class
/// means `m` (M×K), and per-class unconstrained covariance factors `S_raw`
/// (K matrices of M×M, mapped through `build_chol`). Once the owning task
/// completes the block is frozen and never changes again.
#[derive(Debug, Clone, PartialEq)]
pub struct InducingBlock {
    z: Array2<Real>,
    m: Array2<Real>,
    s_raw: Vec<Array2<Real>>,
    frozen: bool,
}

impl InducingBlock {
    /// Fresh unfrozen block at the given inducing inputs: zero means and
    /// identity covariance for every class.
    pub fn init(z: Array2<Real>, num_classes: usize) -> Result<Self> {
        if z.nrows() == 0 || z.ncols() == 0 {
            return Err(Error::InvalidOperation(
                "inducing inputs must be a nonempty matrix".into(),
            ));
        }
        if num_classes < 2 {
            return Err(Error::InvalidOperation(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidOperation("non-finite inducing inputs".into()));
        }
        let m_count = z.nrows();
        let mut raw = Array2::zeros((m_count, m_count));
        for i in 0..m_count {
            raw[(i, i)] = RAW_UNIT_DIAG;
        }
        Ok(InducingBlock {
            m: Array2::zeros((m_count, num_classes)),
            s_raw: vec![raw; num_classes],
            z,
            frozen: false,
        })
    }

    pub(crate) fn from_parts(
        z: Array2<Real>,
        m: Array2<Real>,
        s_raw: Vec<Array2<Real>>,
        frozen: bool,
    ) -> Result<Self> {
        let rows = z.nrows();
        let classes = m.ncols();
        if rows == 0 || m.nrows() != rows || s_raw.len() != classes || classes < 2 {
            return Err(Error::InvalidOperation(
                "inconsistent inducing-block dimensions".into(),
            ));
        }
        if s_raw.iter().any(|s| s.dim() != (rows, rows)) {
            return Err(Error::InvalidOperation(
                "covariance parameter must be M×M per class".into(),
            ));
        }
        let finite = z.iter().chain(m.iter()).chain(s_raw.iter().flatten());
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidOperation(
                "non-finite inducing-block parameters".into(),
            ));
        }
        Ok(InducingBlock { z, m, s_raw, frozen })
    }

    pub fn num_inducing(&self) -> usize {
        self.z.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.m.ncols()
    }

    pub fn z(&self) -> ArrayView2<'_, Real> {
        self.z.view()
    }

    /// Per-class variational means, M×K.
    pub fn m(&self) -> ArrayView2<'_, Real> {
        self.m.view()
    }

    /// Unconstrained covariance parameter of class `k`.
    pub fn s_raw(&self, k: usize) -> ArrayView2<'_, Real> {
        self.s_raw[k].view()
    }

    pub fn class_mean(&self, k: usize) -> Array1<Real> {
        self.m.column(k).to_owned()
    }

    /// Variational covariance factor of class `k` (softplus-diagonal map of
    /// the raw parameter).
    pub fn class_chol(&self, k: usize) -> Array2<Real> {
        build_chol(self.s_raw[k].view()).expect("block parameters validated at construction")
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Overwrites the trainable parameters (trainer write-back at the end of
    /// an epoch). Shape and finiteness are revalidated so optimizer blow-ups
    /// surface as errors instead of NaN state.
    pub fn set_params(
        &mut self,
        z: Array2<Real>,
        m: Array2<Real>,
        s_raw: Vec<Array2<Real>>,
    ) -> Result<()> {
        if self.frozen {
            return Err(Error::InvalidOperation(
                "cannot modify a frozen inducing block".into(),
            ));
        }
        let replacement = InducingBlock::from_parts(z, m, s_raw, false)?;
        if replacement.z.dim() != self.z.dim() || replacement.m.ncols() != self.m.ncols() {
            return Err(Error::InvalidOperation(
                "parameter update changes block dimensions".into(),
            ));
        }
        *self = replacement;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Continual state
// ---------------------------------------------------------------------------

/// Full model state across tasks: the ordered inducing blocks (exactly the
/// last one may be unfrozen), the hyperparameter posterior `hyper_q` and its
/// previous-task snapshot `hyper_prev` (the standard-normal prior before any
/// task completes), and the label/input dimensions.
#[derive(Debug, Clone)]
pub struct ContinualState {
    input_dim: usize,
    num_classes: usize,
    coupling: Coupling,
    tied_lengthscales: bool,
    point_hypers: bool,
    blocks: Vec<InducingBlock>,
    /// Previous task's block for the replace-instead-of-append variant; the
    /// divergence correction of that bound conditions on it.
    replaced: Option<InducingBlock>,
    hyper_q: DiagGaussian<Real>,
    hyper_prev: DiagGaussian<Real>,
    completed_tasks: usize,
}

impl ContinualState {
    pub fn new(
        input_dim: usize,
        num_classes: usize,
        coupling: Coupling,
        tied_lengthscales: bool,
        point_hypers: bool,
    ) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidOperation("input_dim must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidOperation(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let hyper_dim = (if tied_lengthscales { 1 } else { input_dim }) + 1;
        Ok(ContinualState {
            input_dim,
            num_classes,
            coupling,
            tied_lengthscales,
            point_hypers,
            blocks: Vec::new(),
            replaced: None,
            hyper_q: DiagGaussian::standard(hyper_dim),
            hyper_prev: DiagGaussian::standard(hyper_dim),
            completed_tasks: 0,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        input_dim: usize,
        num_classes: usize,
        coupling: Coupling,
        tied_lengthscales: bool,
        point_hypers: bool,
        blocks: Vec<InducingBlock>,
        replaced: Option<InducingBlock>,
        hyper_q: DiagGaussian<Real>,
        hyper_prev: DiagGaussian<Real>,
        completed_tasks: usize,
    ) -> Result<Self> {
        let mut state = ContinualState::new(
            input_dim,
            num_classes,
            coupling,
            tied_lengthscales,
            point_hypers,
        )?;
        for (i, b) in blocks.iter().enumerate() {
            let unfrozen_ok = i + 1 == blocks.len();
            if !b.frozen() && !unfrozen_ok {
                return Err(Error::InvalidOperation(
                    "only the last inducing block may be unfrozen".into(),
                ));
            }
            if b.z().ncols() != input_dim || b.num_classes() != num_classes {
                return Err(Error::InvalidOperation(
                    "inducing block disagrees with state dimensions".into(),
                ));
            }
        }
        if hyper_q.dim() != state.hyper_dim() || hyper_prev.dim() != state.hyper_dim() {
            return Err(Error::InvalidOperation(
                "hyperparameter posterior has the wrong dimension".into(),
            ));
        }
        state.blocks = blocks;
        state.replaced = replaced;
        state.hyper_q = hyper_q;
        state.hyper_prev = hyper_prev;
        state.completed_tasks = completed_tasks;
        Ok(state)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn coupling(&self) -> Coupling {
        self.coupling
    }

    pub fn tied_lengthscales(&self) -> bool {
        self.tied_lengthscales
    }

    /// Whether hyperparameters are treated as a point estimate (posterior
    /// mean) instead of being integrated over.
    pub fn point_hypers(&self) -> bool {
        self.point_hypers
    }

    pub fn lengthscale_count(&self) -> usize {
        if self.tied_lengthscales {
            1
        } else {
            self.input_dim
        }
    }

    /// Dimension of θ = [log lengthscales…, log scale].
    pub fn hyper_dim(&self) -> usize {
        self.lengthscale_count() + 1
    }

    pub fn blocks(&self) -> &[InducingBlock] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Tasks fully trained so far.
    pub fn completed_tasks(&self) -> usize {
        self.completed_tasks
    }

    /// 1-based index of the task currently being (or about to be) trained.
    pub fn current_task_number(&self) -> usize {
        self.completed_tasks + 1
    }

    pub fn hyper_q(&self) -> &DiagGaussian<Real> {
        &self.hyper_q
    }

    pub fn hyper_prev(&self) -> &DiagGaussian<Real> {
        &self.hyper_prev
    }

    pub fn replaced_block(&self) -> Option<&InducingBlock> {
        self.replaced.as_ref()
    }

    pub fn last_block(&self) -> Result<&InducingBlock> {
        self.blocks
            .last()
            .ok_or_else(|| Error::InvalidOperation("state has no inducing blocks".into()))
    }

    /// Mutable access to the live (unfrozen) last block.
    pub fn last_block_mut(&mut self) -> Result<&mut InducingBlock> {
        let block = self
            .blocks
            .last_mut()
            .ok_or_else(|| Error::InvalidOperation("state has no inducing blocks".into()))?;
        if block.frozen {
            return Err(Error::InvalidOperation(
                "last inducing block is frozen; begin a new task first".into(),
            ));
        }
        Ok(block)
    }

    /// Starts a new task by appending a fresh block. All existing blocks must
    /// be frozen.
    pub fn append_task(&mut self, z: Array2<Real>) -> Result<()> {
        if self.blocks.iter().any(|b| !b.frozen()) {
            return Err(Error::InvalidOperation(
                "cannot start a task while another is in progress".into(),
            ));
        }
        if z.ncols() != self.input_dim {
            return Err(Error::InvalidOperation(format!(
                "inducing inputs have {} columns, state expects {}",
                z.ncols(),
                self.input_dim
            )));
        }
        self.blocks.push(InducingBlock::init(z, self.num_classes)?);
        Ok(())
    }

    /// Starts a new task by replacing the single existing block (the
    /// global-inducing-point variant), archiving the old block for the
    /// divergence correction.
    pub fn replace_task(&mut self, z: Array2<Real>) -> Result<()> {
        if self.blocks.len() != 1 || !self.blocks[0].frozen() {
            return Err(Error::InvalidOperation(
                "replace_task requires exactly one frozen block".into(),
            ));
        }
        if z.ncols() != self.input_dim {
            return Err(Error::InvalidOperation(format!(
                "inducing inputs have {} columns, state expects {}",
                z.ncols(),
                self.input_dim
            )));
        }
        self.replaced = self.blocks.pop();
        self.blocks.push(InducingBlock::init(z, self.num_classes)?);
        Ok(())
    }

    /// Marks the live block as complete and immutable.
    pub fn freeze_last(&mut self) -> Result<()> {
        let block = self
            .blocks
            .last_mut()
            .ok_or_else(|| Error::InvalidOperation("state has no inducing blocks".into()))?;
        if block.frozen {
            return Err(Error::InvalidOperation("last block is already frozen".into()));
        }
        block.frozen = true;
        self.completed_tasks += 1;
        Ok(())
    }

    /// Snapshots `hyper_q` as the divergence target for the next task.
    pub fn snapshot_hyper_prev(&mut self) {
        self.hyper_prev = self.hyper_q.clone();
    }

    pub fn set_hyper_q(&mut self, q: DiagGaussian<Real>) -> Result<()> {
        if q.dim() != self.hyper_dim() {
            return Err(Error::InvalidOperation(format!(
                "hyperparameter posterior has dimension {}, expected {}",
                q.dim(),
                self.hyper_dim()
            )));
        }
        self.hyper_q = q;
        Ok(())
    }

    /// All frozen-prefix inducing inputs stacked in task order (everything
    /// except the last block), or `None` with fewer than two blocks.
    pub fn frozen_z_stack(&self) -> Option<Array2<Real>> {
        if self.blocks.len() < 2 {
            return None;
        }
        let views: Vec<_> = self.blocks[..self.blocks.len() - 1]
            .iter()
            .map(|b| b.z())
            .collect();
        Some(ndarray::concatenate(Axis(0), &views).expect("blocks share input_dim"))
    }

    fn check_theta(&self, theta: &HyperParams<Real>) -> Result<()> {
        if !theta.compatible_with(self.input_dim) {
            return Err(Error::InvalidOperation(format!(
                "{} lengthscales incompatible with {}-dimensional inputs",
                theta.log_lengthscales().len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    fn check_class(&self, class_k: usize) -> Result<()> {
        if class_k >= self.num_classes {
            return Err(Error::InvalidOperation(format!(
                "class {class_k} out of range [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tape-level machinery (shared by the plain operations below and the
// objective module's gradient computations)
// ---------------------------------------------------------------------------

/// One class's variational parameters on the tape.
pub(crate) struct ClassVars<'t> {
    /// Mean, M×1.
    pub m: Var<'t, Real>,
    /// Covariance factor, M×M lower-triangular.
    pub chol: Var<'t, Real>,
}

/// One inducing block on the tape.
pub(crate) struct BlockVars<'t> {
    pub z: Var<'t, Real>,
    pub classes: Vec<ClassVars<'t>>,
}

/// Lifts a block onto the tape as constants (frozen blocks during training,
/// all blocks during plain evaluation).
pub(crate) fn lift_block<'t>(tape: &'t Tape<Real>, block: &InducingBlock) -> BlockVars<'t> {
    let classes = (0..block.num_classes())
        .map(|k| ClassVars {
            m: tape.constant(to_col(block.m.column(k))),
            chol: tape.constant(block.class_chol(k)),
        })
        .collect();
    BlockVars { z: tape.constant(block.z.clone()), classes }
}

/// Builds a block from live parameter leaves: `z` M×D, `m` M×K, one raw
/// covariance parameter per class (mapped through the softplus-diagonal
/// factor construction on the tape).
pub(crate) fn block_from_params<'t>(
    z: Var<'t, Real>,
    m: Var<'t, Real>,
    s_raw: &[Var<'t, Real>],
) -> BlockVars<'t> {
    let (rows, classes) = m.shape();
    assert_eq!(s_raw.len(), classes, "one covariance parameter per class");
    let classes = (0..classes)
        .map(|k| ClassVars {
            m: m.slice(0, rows, k, k + 1),
            chol: build_chol_t(s_raw[k]),
        })
        .collect();
    BlockVars { z, classes }
}

/// Prior conditional between inducing sets on the tape.
pub(crate) struct PriorCondVars<'t> {
    /// A = K_{new,old} · K_{old,old}⁻¹, N_new×N_old.
    pub coeffs: Var<'t, Real>,
    /// Factor of C = K_{new,new} − K_{new,old} K_{old,old}⁻¹ K_{old,new}.
    pub cond_chol: Var<'t, Real>,
}

/// Computes the prior conditional p(u_new | u_old, θ) = N(A·u_old, C) on the
/// tape. `zero_cross` replaces the cross-kernel with exact zeros — the
/// orthogonal-inducing-points limit, used to verify that the block-diagonal
/// bound coincides with the auto-regressive one at A = 0.
pub(crate) fn prior_conditional_t<'t>(
    hyper: &HyperVar<'t, Real>,
    z_new: Var<'t, Real>,
    z_old: Var<'t, Real>,
    zero_cross: bool,
) -> Result<PriorCondVars<'t>> {
    let (n_new, _) = z_new.shape();
    let (n_old, _) = z_old.shape();
    let tape = z_new.tape();
    let k_oo = eq_kernel_t(hyper, z_old, z_old);
    let old_chol = k_oo.cholesky("prior inducing kernel")?;
    let k_no = if zero_cross {
        tape.zeros(n_new, n_old)
    } else {
        eq_kernel_t(hyper, z_new, z_old)
    };
    // W = L_oo⁻¹ K_{old,new}; then A = (L_oo⁻ᵀ W)ᵀ and C = K_nn − WᵀW.
    let w = old_chol.solve_lower(k_no.t());
    let coeffs = old_chol.solve_lower_t(w).t();
    let k_nn = eq_kernel_t(hyper, z_new, z_new);
    let c = k_nn - w.t().matmul(w);
    let cond_chol = c.cholesky("prior conditional covariance")?;
    Ok(PriorCondVars { coeffs, cond_chol })
}

/// The assembled variational joint on the tape: stacked inducing inputs, one
/// joint Gaussian per class, and the last step's prior conditional (present
/// with two or more blocks).
pub(crate) struct JointVars<'t> {
    pub z_all: Var<'t, Real>,
    pub classes: Vec<GaussianVar<'t, Real>>,
    pub live_prior: Option<PriorCondVars<'t>>,
}

/// Folds the blocks into the closed-form joint q(u_{≤t} | θ) per class.
/// Auto-regressive coupling threads the prior coefficients A_j into each
/// conditional mean; block-diagonal coupling replaces them with zeros (the
/// prior conditional of the final step is still computed, because the
/// divergence term needs it).
pub(crate) fn variational_joint_t<'t>(
    hyper: &HyperVar<'t, Real>,
    blocks: &[BlockVars<'t>],
    coupling: Coupling,
    zero_cross: bool,
) -> Result<JointVars<'t>> {
    assert!(!blocks.is_empty(), "variational joint needs at least one block");
    let tape = blocks[0].z.tape();

    let mut z_all = blocks[0].z;
    let mut prev_rows = blocks[0].z.shape().0;
    let mut classes: Vec<GaussianVar<'t, Real>> = blocks[0]
        .classes
        .iter()
        .map(|c| GaussianVar { mean: c.m, chol: c.chol })
        .collect();
    let mut live_prior = None;

    for (j, block) in blocks.iter().enumerate().skip(1) {
        let is_last = j + 1 == blocks.len();
        let rows = block.z.shape().0;
        // Block-diagonal coupling only ever consumes the final step's prior
        // conditional (for the divergence term), so skip the intermediate
        // factorizations it would never read.
        let prior = if coupling == Coupling::AutoRegressive || is_last {
            Some(prior_conditional_t(hyper, block.z, z_all, zero_cross)?)
        } else {
            None
        };
        for (k, joint) in classes.iter_mut().enumerate() {
            let coeffs = match coupling {
                Coupling::AutoRegressive => {
                    prior.as_ref().expect("computed for every step").coeffs
                }
                Coupling::BlockDiagonal => tape.zeros(rows, prev_rows),
            };
            *joint = ar_join_t(joint, coeffs, block.classes[k].m, block.classes[k].chol);
        }
        if is_last {
            live_prior = prior;
        }
        z_all = z_all.vcat(block.z);
        prev_rows += rows;
    }

    Ok(JointVars { z_all, classes, live_prior })
}

/// Per-class predictive means and variances at `x` (P×D) on the tape, given
/// the stacked inducing inputs and the per-class joint. Returns one
/// (mean P×1, variance P×1) pair per class.
///
/// With W = L_zz⁻¹K_{z,x} and V = K_zz⁻¹K_{z,x}:
/// mean_k = Vᵀμ_k and var_k = γ − colsums(W⊙W) + colsums((L_qᵀV)⊙(L_qᵀV)),
/// the exponentiated-quadratic diagonal K(x,x) being exactly γ. Variances
/// below −1e-8 are an error; the remaining round-off is clamped to ≥ 1e-12.
pub(crate) fn predictive_marginals_t<'t>(
    hyper: &HyperVar<'t, Real>,
    z_all: Var<'t, Real>,
    classes: &[GaussianVar<'t, Real>],
    x: Var<'t, Real>,
) -> Result<Vec<(Var<'t, Real>, Var<'t, Real>)>> {
    let k_zz = eq_kernel_t(hyper, z_all, z_all);
    let l_zz = k_zz.cholesky("predictive inducing kernel")?;
    let k_zx = eq_kernel_t(hyper, z_all, x);
    let w = l_zz.solve_lower(k_zx);
    let v = l_zz.solve_lower_t(w);
    let prior_reduction = (w * w).col_sums().t();

    let mut out = Vec::with_capacity(classes.len());
    for joint in classes {
        let mean = v.t().matmul(joint.mean);
        let lv = joint.chol.t().matmul(v);
        let q_part = (lv * lv).col_sums().t();
        let var = hyper.scale() - prior_reduction + q_part;
        let min_var = var.value().iter().copied().fold(Real::INFINITY, Real::min);
        if min_var < VARIANCE_FLOOR_TOL {
            return Err(Error::InvalidOperation(format!(
                "predictive variance {min_var:e} below the −1e-8 round-off tolerance"
            )));
        }
        out.push((mean, var.clamp_min(VARIANCE_CLAMP)));
    }
    Ok(out)
}

/// Lifts an entire state onto a tape as constants and assembles the joint.
pub(crate) fn lift_state_joint<'t>(
    tape: &'t Tape<Real>,
    state: &ContinualState,
    theta: &HyperParams<Real>,
) -> Result<(HyperVar<'t, Real>, JointVars<'t>)> {
    let hyper = HyperVar::constant(tape, theta);
    let blocks: Vec<_> = state.blocks().iter().map(|b| lift_block(tape, b)).collect();
    let joint = variational_joint_t(&hyper, &blocks, state.coupling(), false)?;
    Ok((hyper, joint))
}

// ---------------------------------------------------------------------------
// Plain-value operations
// ---------------------------------------------------------------------------

/// Prior conditional between inducing sets: returns the coefficient matrix
/// `A = K_{new,old}K_{old,old}⁻¹` and the factor of the conditional
/// covariance `C = K_{new,new} − A·K_{old,new}`.
pub fn prior_conditional(
    theta: &HyperParams<Real>,
    z_new: ArrayView2<Real>,
    z_old: ArrayView2<Real>,
) -> Result<(Array2<Real>, Array2<Real>)> {
    if z_old.nrows() == 0 || z_new.nrows() == 0 {
        return Err(Error::InvalidOperation(
            "prior conditional needs nonempty inducing sets".into(),
        ));
    }
    if z_new.ncols() != z_old.ncols() {
        return Err(Error::InvalidOperation(format!(
            "inducing sets disagree on dimension: {} vs {}",
            z_new.ncols(),
            z_old.ncols()
        )));
    }
    if !theta.compatible_with(z_new.ncols()) {
        return Err(Error::InvalidOperation(format!(
            "{} lengthscales incompatible with {}-dimensional inducing inputs",
            theta.log_lengthscales().len(),
            z_new.ncols()
        )));
    }
    let tape = Tape::new();
    let hyper = HyperVar::constant(&tape, theta);
    let zn = tape.constant(z_new.to_owned());
    let zo = tape.constant(z_old.to_owned());
    let pc = prior_conditional_t(&hyper, zn, zo, false)?;
    Ok((pc.coeffs.to_array(), pc.cond_chol.to_array()))
}

/// The closed-form variational joint over all inducing outputs of class
/// `class_k`, N(μ, Σ) of dimension Σ_j M_j.
pub fn variational_joint(
    state: &ContinualState,
    theta: &HyperParams<Real>,
    class_k: usize,
) -> Result<GaussianDist<Real>> {
    state.check_theta(theta)?;
    state.check_class(class_k)?;
    state.last_block()?;
    let tape = Tape::new();
    let (_, joint) = lift_state_joint(&tape, state, theta)?;
    let g = &joint.classes[class_k];
    Ok(GaussianDist::new(
        g.mean.to_array().column(0).to_owned(),
        g.chol.to_array(),
    )?)
}

/// Predictive marginals of the latent functions at `xstar` (P×D), given an
/// explicit joint over inducing outputs: per-class means and variances as
/// P×K matrices.
pub fn predictive_from_joint(
    theta: &HyperParams<Real>,
    z_all: ArrayView2<Real>,
    class_joints: &[GaussianDist<Real>],
    xstar: ArrayView2<Real>,
) -> Result<(Array2<Real>, Array2<Real>)> {
    if xstar.nrows() == 0 {
        return Err(Error::InvalidOperation("need at least one query point".into()));
    }
    if xstar.ncols() != z_all.ncols() {
        return Err(Error::InvalidOperation(format!(
            "query points have {} columns, inducing inputs {}",
            xstar.ncols(),
            z_all.ncols()
        )));
    }
    if class_joints.is_empty() || class_joints.iter().any(|j| j.dim() != z_all.nrows()) {
        return Err(Error::InvalidOperation(
            "per-class joints must match the stacked inducing count".into(),
        ));
    }
    let tape = Tape::new();
    let hyper = HyperVar::constant(&tape, theta);
    let zv = tape.constant(z_all.to_owned());
    let xv = tape.constant(xstar.to_owned());
    let joints: Vec<_> = class_joints
        .iter()
        .map(|j| GaussianVar::constant(&tape, j))
        .collect();
    let pairs = predictive_marginals_t(&hyper, zv, &joints, xv)?;
    collect_marginals(xstar.nrows(), &pairs)
}

/// Predictive marginals of the latent functions under the state's joint:
/// per-class means and variances as P×K matrices.
pub fn predictive_marginals(
    state: &ContinualState,
    theta: &HyperParams<Real>,
    xstar: ArrayView2<Real>,
) -> Result<(Array2<Real>, Array2<Real>)> {
    state.check_theta(theta)?;
    state.last_block()?;
    if xstar.nrows() == 0 {
        return Err(Error::InvalidOperation("need at least one query point".into()));
    }
    if xstar.ncols() != state.input_dim() {
        return Err(Error::InvalidOperation(format!(
            "query points have {} columns, state expects {}",
            xstar.ncols(),
            state.input_dim()
        )));
    }
    let tape = Tape::new();
    let (hyper, joint) = lift_state_joint(&tape, state, theta)?;
    let xv = tape.constant(xstar.to_owned());
    let pairs = predictive_marginals_t(&hyper, joint.z_all, &joint.classes, xv)?;
    collect_marginals(xstar.nrows(), &pairs)
}

fn collect_marginals(
    points: usize,
    pairs: &[(Var<'_, Real>, Var<'_, Real>)],
) -> Result<(Array2<Real>, Array2<Real>)> {
    let mut means = Array2::zeros((points, pairs.len()));
    let mut vars = Array2::zeros((points, pairs.len()));
    for (k, (mean, var)) in pairs.iter().enumerate() {
        means.slice_mut(s![.., k..k + 1]).assign(&mean.to_array());
        vars.slice_mut(s![.., k..k + 1]).assign(&var.to_array());
    }
    Ok((means, vars))
}
