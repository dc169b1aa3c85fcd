//! Experiment orchestration: builds the benchmark's task stream, trains the
//! tasks sequentially under the selected variant, and checkpoints, evaluates,
//! and writes the report after every task. A run that died partway resumes
//! from its newest checkpoint and finishes identically to an uninterrupted
//! run.

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use congp_core::Real;

use crate::checkpoint;
use crate::config::{Benchmark, ExperimentConfig, Variant};
use crate::data::{
    apply_caps, gen_toy, load_idx, make_permuted_tasks, make_split_tasks, TaskStream,
};
use crate::eval::{export_inducing, update_report, EvalReport};
use crate::model::{ContinualState, Coupling};
use crate::trainer::{train_task, EpochRecord, TaskSummary, TrainConfig};
use crate::{Error, Result};

/// Environment variable that overrides the config's data directory.
pub const DATA_DIR_ENV: &str = "CONGP_DATA_DIR";
/// ChaCha20 stream for the evaluation pass after task `t` is
/// `EVAL_STREAM_BASE + t`.
pub const EVAL_STREAM_BASE: u64 = 2000;

/// One line of the run's machine-readable log.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    /// Numeric fields outside their customary ranges (never clamped).
    Warning { message: String },
    Resumed { from_task: usize },
    Epoch(EpochRecord),
    TaskComplete {
        task: usize,
        epochs_run: usize,
        /// Mean test accuracy over the tasks seen so far.
        seen_mean: Real,
    },
}

/// Everything a finished run leaves behind, for callers that want more than
/// the files.
#[derive(Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub state: ContinualState,
    pub report: EvalReport,
    pub summaries: Vec<TaskSummary>,
}

fn resolve_data_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
        return Ok(PathBuf::from(dir));
    }
    cfg.data_dir.clone().ok_or_else(|| {
        Error::Config(format!(
            "benchmark needs a data directory: set data_dir or {DATA_DIR_ENV}"
        ))
    })
}

/// Builds the configured benchmark's task stream, desk-scale caps applied.
pub fn build_stream(cfg: &ExperimentConfig) -> Result<TaskStream> {
    let mut stream = match cfg.benchmark {
        Benchmark::Toy => gen_toy(cfg.seed),
        Benchmark::SplitMnist | Benchmark::PermutedMnist => {
            let dir = resolve_data_dir(cfg)?;
            let (x_train, y_train) = load_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            let (x_test, y_test) = load_idx(
                &dir.join("t10k-images-idx3-ubyte"),
                &dir.join("t10k-labels-idx1-ubyte"),
            )?;
            match cfg.benchmark {
                Benchmark::SplitMnist => make_split_tasks(
                    &x_train, &y_train, &x_test, &y_test, cfg.val_total, cfg.seed,
                )?,
                _ => make_permuted_tasks(
                    &x_train,
                    &y_train,
                    &x_test,
                    &y_test,
                    cfg.task_count(),
                    cfg.val_total,
                    cfg.seed,
                )?,
            }
        }
    };
    apply_caps(&mut stream, cfg.train_cap, cfg.test_cap, cfg.seed);
    Ok(stream)
}

fn train_config(cfg: &ExperimentConfig, run_dir: &PathBuf) -> TrainConfig {
    TrainConfig {
        eta: cfg.eta,
        batch_size: cfg.batch_size,
        max_epochs: cfg.max_epochs,
        patience: cfg.patience,
        tolerance: cfg.tolerance,
        beta: cfg.beta,
        num_inducing: cfg.num_inducing,
        seed: cfg.seed,
        num_theta_samples: cfg.num_theta_samples,
        eval_samples: cfg.num_eval_samples,
        val_subset_cap: cfg.val_subset_cap,
        parallel: cfg.parallel,
        replace_blocks: cfg.variant == Variant::Global,
        dump_dir: Some(run_dir.clone()),
    }
}

fn fresh_state(cfg: &ExperimentConfig, stream: &TaskStream) -> Result<ContinualState> {
    let coupling = match cfg.variant {
        Variant::BlockDiag => Coupling::BlockDiagonal,
        _ => Coupling::AutoRegressive,
    };
    ContinualState::new(
        stream.input_dim,
        stream.num_classes,
        coupling,
        cfg.tied_lengthscales,
        cfg.variant.point_hypers(),
    )
    .map_err(Error::from)
}

fn checkpoint_path(run_dir: &PathBuf, task: usize) -> PathBuf {
    run_dir.join(format!("task_{task}.ckpt"))
}

/// Loads the newest checkpoint in `run_dir`, if any, returning the state,
/// the report, and the next task index to train.
fn try_resume(
    run_dir: &PathBuf,
    cfg: &ExperimentConfig,
    num_tasks: usize,
) -> Result<Option<(ContinualState, EvalReport, usize)>> {
    for t in (0..num_tasks).rev() {
        let path = checkpoint_path(run_dir, t);
        if !path.exists() {
            continue;
        }
        let (state, report) = checkpoint::load(&path)?;
        let report = report.ok_or_else(|| {
            Error::Checkpoint(format!("{} carries no report", path.display()))
        })?;
        if report.config_digest != cfg.digest() {
            return Err(Error::Checkpoint(format!(
                "{} belongs to config digest {}, expected {}",
                path.display(),
                report.config_digest,
                cfg.digest()
            )));
        }
        if state.completed_tasks() != t + 1 {
            return Err(Error::Checkpoint(format!(
                "{} records {} completed tasks, expected {}",
                path.display(),
                state.completed_tasks(),
                t + 1
            )));
        }
        return Ok(Some((state, report, t + 1)));
    }
    Ok(None)
}

/// Runs the configured experiment end to end. Artifacts land in
/// `output_dir/run-{digest}`: per-task checkpoints, the evaluation report,
/// and the inducing-point export. Emits machine-readable progress through
/// `on_event`.
pub fn run(
    cfg: &ExperimentConfig,
    mut on_event: Option<&mut dyn FnMut(&RunEvent)>,
) -> Result<RunArtifacts> {
    cfg.validate()?;
    let mut emit = |event: RunEvent| {
        if let Some(cb) = on_event.as_mut() {
            cb(&event);
        }
    };
    for message in cfg.range_warnings() {
        emit(RunEvent::Warning { message });
    }

    let stream = build_stream(cfg)?;
    let num_tasks = stream.tasks.len();
    let run_dir = cfg.output_dir.join(format!("run-{}", cfg.digest()));
    fs::create_dir_all(&run_dir)?;
    let tcfg = train_config(cfg, &run_dir);

    let (mut state, mut report, start) = match try_resume(&run_dir, cfg, num_tasks)? {
        Some((state, report, start)) => {
            emit(RunEvent::Resumed { from_task: start });
            (state, report, start)
        }
        None => (
            fresh_state(cfg, &stream)?,
            EvalReport::new(&stream, cfg.seed, cfg.digest()),
            0,
        ),
    };

    let mut summaries = Vec::new();
    for t in start..num_tasks {
        let task = &stream.tasks[t];
        let mut forward = |r: &EpochRecord| emit(RunEvent::Epoch(r.clone()));
        let summary = train_task(&mut state, task, &tcfg, Some(&mut forward))?;

        let mut eval_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        eval_rng.set_stream(EVAL_STREAM_BASE + t as u64);
        update_report(&mut report, &state, &stream, t, cfg.num_eval_samples, &mut eval_rng)?;

        export_inducing(&state, &run_dir.join("inducing"))?;
        fs::write(run_dir.join("report.json"), report.to_json()?)?;
        checkpoint::save(&checkpoint_path(&run_dir, t), &state, Some(&report))?;

        emit(RunEvent::TaskComplete {
            task: t,
            epochs_run: summary.epochs_run,
            seen_mean: report.seen_mean(t),
        });
        summaries.push(summary);
    }

    Ok(RunArtifacts { run_dir, state, report, summaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ExperimentConfig;

    fn toy_config(dir: &std::path::Path) -> ExperimentConfig {
        let text = serde_json::json!({
            "benchmark": "toy",
            "variant": "vargp",
            "seed": 3,
            "eta": 0.02,
            "batch_size": 80,
            "max_epochs": 3,
            "patience": 2,
            "tolerance": 1e-4,
            "beta": 1.0,
            "num_inducing": 8,
            "num_theta_samples": 1,
            "num_eval_samples": 2,
            "output_dir": dir.join("out"),
        });
        serde_json::from_value(text).unwrap()
    }

    #[test]
    fn toy_run_writes_every_artifact_and_resumes_as_a_no_op() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let mut events = Vec::new();
        let mut sink = |e: &RunEvent| events.push(serde_json::to_string(e).unwrap());
        let artifacts = run(&cfg, Some(&mut sink)).unwrap();

        assert_eq!(artifacts.summaries.len(), 2);
        assert_eq!(artifacts.state.completed_tasks(), 2);
        assert!(artifacts.report.row_filled(1));
        let run_dir = &artifacts.run_dir;
        assert!(run_dir.ends_with(format!("run-{}", cfg.digest())));
        for name in ["task_0.ckpt", "task_1.ckpt", "report.json"] {
            assert!(run_dir.join(name).exists(), "{name} missing");
        }
        assert!(run_dir.join("inducing").join("inducing_task_1.csv").exists());
        assert!(events.iter().any(|e| e.contains("\"event\":\"epoch\"")));
        assert!(events.iter().any(|e| e.contains("\"event\":\"task_complete\"")));

        // a second invocation finds both checkpoints and trains nothing
        let report_bytes = fs::read(run_dir.join("report.json")).unwrap();
        let mut resumed_events = Vec::new();
        let mut sink = |e: &RunEvent| resumed_events.push(serde_json::to_string(e).unwrap());
        let resumed = run(&cfg, Some(&mut sink)).unwrap();
        assert!(resumed.summaries.is_empty());
        assert!(resumed_events.iter().any(|e| e.contains("\"event\":\"resumed\"")));
        assert_eq!(
            checkpoint::to_bytes(&resumed.state, Some(&resumed.report)).unwrap(),
            checkpoint::to_bytes(&artifacts.state, Some(&artifacts.report)).unwrap()
        );
        assert_eq!(fs::read(run_dir.join("report.json")).unwrap(), report_bytes);
    }

    #[test]
    fn interrupted_runs_finish_identically_to_uninterrupted_ones() {
        let dir_a = tempfile::tempdir().unwrap();
        let cfg_a = toy_config(dir_a.path());
        let straight = run(&cfg_a, None).unwrap();

        // same config in a fresh directory, but kill the run after task 0 by
        // deleting the second checkpoint before it exists: emulate by running
        // fully, dropping task_1.ckpt and report row 1, then resuming
        let dir_b = tempfile::tempdir().unwrap();
        let cfg_b = toy_config(dir_b.path());
        let first = run(&cfg_b, None).unwrap();
        fs::remove_file(checkpoint_path(&first.run_dir, 1)).unwrap();
        let resumed = run(&cfg_b, None).unwrap();
        assert_eq!(resumed.summaries.len(), 1, "only task 1 retrained");
        assert_eq!(
            checkpoint::to_bytes(&resumed.state, Some(&resumed.report)).unwrap(),
            checkpoint::to_bytes(&straight.state, Some(&straight.report)).unwrap(),
            "resumed run must match the uninterrupted run bitwise"
        );
    }

    #[test]
    fn digest_mismatch_inside_the_run_dir_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = toy_config(dir.path());
        let artifacts = run(&cfg, None).unwrap();
        // same digest directory, different effective config (seed changed)
        let mut other = cfg.clone();
        other.seed = 4;
        // force the same run_dir by pointing output_dir at the original's
        // run dir parent and renaming ours over it
        let stolen = other.output_dir.join(format!("run-{}", other.digest()));
        fs::create_dir_all(&stolen).unwrap();
        fs::copy(
            checkpoint_path(&artifacts.run_dir, 1),
            checkpoint_path(&stolen, 1),
        )
        .unwrap();
        let err = run(&other, None).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn missing_data_dir_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = toy_config(dir.path());
        cfg.benchmark = Benchmark::SplitMnist;
        // only meaningful when the override is absent; the test environment
        // does not set it
        if std::env::var_os(DATA_DIR_ENV).is_none() {
            let err = run(&cfg, None).unwrap_err();
            assert!(err.to_string().contains("data directory"), "{err}");
        }
    }
}
