//! Per-task training loop: inducing-point initialization, mini-batch ascent
//! on the task's variational bound with the Yogi optimizer, validation-based
//! early stopping, and block freezing.

use std::fs;
use std::path::PathBuf;

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use congp_core::gaussian::DiagGaussian;
use congp_core::Real;

use crate::data::{take_rows, TaskDataset};
use crate::eval::{accuracy, predict_proba};
use crate::model::ContinualState;
use crate::objective::{elbo_training_step, ElboConfig, ElboNoise, LiveParams};
use crate::optim::{yogi_step, OptState};
use crate::{Error, Result};

/// ChaCha20 stream for task `t`'s training randomness is
/// `TRAIN_STREAM_BASE + t` (0-based task ids).
pub const TRAIN_STREAM_BASE: u64 = 1000;

/// Knobs for one task's optimization.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Yogi step size.
    pub eta: Real,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early-stopping window: training may stop after epoch `patience + 1`.
    pub patience: usize,
    /// Early-stopping accuracy tolerance.
    pub tolerance: Real,
    /// Weight on the hyperparameter divergence term of the bound.
    pub beta: Real,
    /// Inducing points allotted to the task's block.
    pub num_inducing: usize,
    pub seed: u64,
    pub num_theta_samples: usize,
    /// Monte-Carlo samples behind each validation-accuracy measurement.
    pub eval_samples: usize,
    /// Largest training subset used for validation when the task has no
    /// validation split.
    pub val_subset_cap: usize,
    /// Fan batch gradients out over worker threads (bitwise identical to the
    /// sequential path).
    pub parallel: bool,
    /// Replace the single shared block instead of appending one (the
    /// global-inducing-point variant).
    pub replace_blocks: bool,
    /// Where to write a diagnostics file if the objective turns non-finite.
    pub dump_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if !(self.tolerance >= 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "tolerance must be nonnegative, got {}",
                self.tolerance
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be nonnegative, got {}",
                self.beta
            )));
        }
        if self.num_inducing == 0 {
            return Err(Error::Config("num_inducing must be at least 1".into()));
        }
        if self.num_theta_samples == 0 {
            return Err(Error::Config("num_theta_samples must be at least 1".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be at least 1".into()));
        }
        if self.val_subset_cap == 0 {
            return Err(Error::Config("val_subset_cap must be at least 1".into()));
        }
        Ok(())
    }
}

/// One line of the machine-readable training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub task: usize,
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean over the epoch's batches of the full-dataset bound estimate.
    pub elbo: Real,
    pub val_accuracy: Real,
}

/// What one `train_task` call did.
#[derive(Debug, Clone)]
pub struct TaskSummary {
    pub task_id: usize,
    pub epochs_run: usize,
    pub epoch_elbos: Vec<Real>,
    pub val_accuracies: Vec<Real>,
}

/// Initial hyperparameter posterior over `num_lengthscales + 1`
/// log-parameters, spread 0.1 around the means.
///
/// Log-lengthscales start at ln ℓ₀ with ℓ₀² = E‖x−x′‖²/2 over the training
/// inputs, so the average kernel exponent is −1 at initialization: typical
/// point pairs sit in the kernel's active range rather than the underflowed
/// tail (a fixed ℓ = 1 on 784-dim pixel data puts every cross-coupling and
/// its gradient at ~e^{−50}, and optimization cannot move) or the flat head
/// (too-large ℓ couples every point to every task's inducing block). The
/// mean squared distance comes from the closed form
/// E‖x−x′‖² = 2·N/(N−1)·Σ_d Var(x_d) — no pair enumeration, no sampling.
/// The log-scale starts at the prior mean 0.
pub fn init_hyper_posterior(
    num_lengthscales: usize,
    x_train: ArrayView2<Real>,
) -> Result<DiagGaussian<Real>> {
    if num_lengthscales == 0 {
        return Err(Error::InvalidOperation(
            "need at least one lengthscale".into(),
        ));
    }
    let n = x_train.nrows();
    let mut half_msd: Real = 0.0;
    if n >= 2 {
        for col in x_train.columns() {
            let mean = col.sum() / n as Real;
            half_msd += col.iter().map(|&v| (v - mean).powi(2)).sum::<Real>() / (n - 1) as Real;
        }
    }
    // degenerate inputs (single point, all points equal) fall back to ℓ₀ = 1
    let log_ls = if half_msd > 1e-12 { 0.5 * half_msd.ln() } else { 0.0 };
    let dim = num_lengthscales + 1;
    let mut mean = Array1::from_elem(dim, log_ls);
    mean[num_lengthscales] = 0.0;
    DiagGaussian::new(mean, Array1::from_elem(dim, (0.1 as Real).ln())).map_err(Error::from)
}

/// Picks the new block's inducing inputs as a random size-M subset of the
/// training inputs without replacement: label-stratified (even quotas over
/// the present classes, remainder to the lowest labels) whenever every class
/// can fill its quota, plain uniform otherwise.
fn init_inducing(
    x: &Array2<Real>,
    y: &Array1<usize>,
    m: usize,
    rng: &mut ChaCha20Rng,
) -> Array2<Real> {
    let n = x.nrows();
    debug_assert!(m <= n);
    let mut labels: Vec<usize> = y.iter().copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let per_class: Vec<Vec<usize>> = labels
        .iter()
        .map(|&c| (0..n).filter(|&i| y[i] == c).collect())
        .collect();
    let base = m / labels.len();
    let rem = m % labels.len();
    let quotas: Vec<usize> = (0..labels.len()).map(|i| base + usize::from(i < rem)).collect();
    let stratified = per_class.iter().zip(&quotas).all(|(rows, &q)| rows.len() >= q);
    let mut chosen = Vec::with_capacity(m);
    if stratified {
        for (rows, &q) in per_class.iter().zip(&quotas) {
            for j in rand::seq::index::sample(rng, rows.len(), q) {
                chosen.push(rows[j]);
            }
        }
    } else {
        chosen.extend(rand::seq::index::sample(rng, n, m));
    }
    let mut z = Array2::zeros((m, x.ncols()));
    for (out, &i) in chosen.iter().enumerate() {
        z.row_mut(out).assign(&x.row(i));
    }
    z
}

/// Best-effort diagnostics dump for a non-finite objective; training aborts
/// with the returned error regardless of whether the file landed.
fn dump_diagnostics(cfg: &TrainConfig, task: usize, epoch: usize, batch: usize, detail: &str) {
    let Some(dir) = cfg.dump_dir.as_ref() else {
        return;
    };
    let body = serde_json::json!({
        "task": task,
        "epoch": epoch,
        "batch": batch,
        "detail": detail,
    });
    let _ = fs::create_dir_all(dir);
    let _ = fs::write(
        dir.join(format!("diagnostics_task_{task}.json")),
        body.to_string(),
    );
}

/// Trains one task: appends (or, for the global variant, replaces) an
/// inducing block initialized from the task's training inputs, optimizes the
/// block and the hyperparameter posterior by mini-batch ascent on the
/// state's bound, early-stops once the validation accuracy has moved less
/// than `tolerance` over `patience` epochs (never before epoch
/// `patience + 1`), and freezes the block.
///
/// Task randomness comes from one ChaCha20 stream
/// (`TRAIN_STREAM_BASE + task_id`), consumed in a fixed order: the
/// validation-fallback subset (only when the task lacks a validation split
/// larger than `val_subset_cap` allows skipping), the inducing subset, then
/// per epoch one index shuffle, each batch's bound noise, and the validation
/// forward passes.
pub fn train_task(
    state: &mut ContinualState,
    task: &TaskDataset,
    cfg: &TrainConfig,
    mut progress: Option<&mut dyn FnMut(&EpochRecord)>,
) -> Result<TaskSummary> {
    cfg.validate()?;
    task.check(state.num_classes())?;
    if task.input_dim() != state.input_dim() {
        return Err(Error::Data(format!(
            "task {} has {} features, state expects {}",
            task.task_id,
            task.input_dim(),
            state.input_dim()
        )));
    }
    let n = task.x_train.nrows();
    if cfg.num_inducing > n {
        return Err(Error::Training(format!(
            "task {} has {n} training points, cannot subset {} inducing inputs",
            task.task_id, cfg.num_inducing
        )));
    }

    let completed = state.completed_tasks();
    if completed == 0 {
        // first task: fresh posterior with distance-scaled lengthscales; the
        // standard-normal prior stays the divergence target
        state.set_hyper_q(init_hyper_posterior(
            state.lengthscale_count(),
            task.x_train.view(),
        )?)?;
    } else {
        // warm start from the previous task's converged posterior, which
        // becomes the divergence target
        state.snapshot_hyper_prev();
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM_BASE + task.task_id as u64);

    let (x_val, y_val) = if task.has_val() {
        (task.x_val.clone(), task.y_val.clone())
    } else if n <= cfg.val_subset_cap {
        (task.x_train.clone(), task.y_train.clone())
    } else {
        let idx: Vec<usize> =
            rand::seq::index::sample(&mut rng, n, cfg.val_subset_cap).into_iter().collect();
        take_rows(&task.x_train, &task.y_train, &idx)
    };

    let z = init_inducing(&task.x_train, &task.y_train, cfg.num_inducing, &mut rng);
    if cfg.replace_blocks && completed >= 1 {
        state.replace_task(z)?;
    } else {
        state.append_task(z)?;
    }

    let mut live = LiveParams::from_state(state)?;
    let mut opt = OptState::new(&live.flatten());
    let mut epoch_elbos = Vec::new();
    let mut val_accuracies = Vec::new();
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut elbo_sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (bx, by) = take_rows(&task.x_train, &task.y_train, chunk);
            let ecfg = ElboConfig::new(
                cfg.beta,
                cfg.num_theta_samples,
                n as Real / chunk.len() as Real,
            )?;
            let noise = ElboNoise::draw(state, &ecfg, chunk.len(), &mut rng)?;
            let (parts, grads) =
                elbo_training_step(state, &live, bx.view(), by.view(), &ecfg, &noise, cfg.parallel)?;
            if !parts.elbo.is_finite() {
                let detail = format!("non-finite objective: {parts:?}");
                dump_diagnostics(cfg, task.task_id, epoch, b, &detail);
                return Err(Error::Training(format!(
                    "task {} epoch {epoch} batch {b}: {detail}",
                    task.task_id
                )));
            }
            // ascent on the bound = descent on its negation
            let neg: Vec<Array2<Real>> = grads.iter().map(|g| g.mapv(|v| -v)).collect();
            let mut flat = live.flatten();
            if let Err(err) = yogi_step(&mut flat, &neg, &mut opt, cfg.eta) {
                let detail = format!("optimizer rejected the step: {err}");
                dump_diagnostics(cfg, task.task_id, epoch, b, &detail);
                return Err(Error::Training(format!(
                    "task {} epoch {epoch} batch {b}: {detail}",
                    task.task_id
                )));
            }
            live.apply_flat(&flat);
            elbo_sum += parts.elbo;
            batches += 1;
        }
        live.write_to_state(state)?;
        let elbo = elbo_sum / batches as Real;
        let probs = predict_proba(state, x_val.view(), cfg.eval_samples, &mut rng)?;
        let acc = accuracy(probs.view(), &y_val);
        epoch_elbos.push(elbo);
        val_accuracies.push(acc);
        if let Some(cb) = progress.as_mut() {
            cb(&EpochRecord { task: task.task_id, epoch, elbo, val_accuracy: acc });
        }
        if epoch > cfg.patience {
            let prev = val_accuracies[epoch - cfg.patience - 1];
            if (acc - prev).abs() < cfg.tolerance {
                break;
            }
        }
    }

    state.freeze_last()?;
    Ok(TaskSummary {
        task_id: task.task_id,
        epochs_run: epoch_elbos.len(),
        epoch_elbos,
        val_accuracies,
    })
}
