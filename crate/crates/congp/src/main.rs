//! Command-line front end: run experiments, evaluate checkpoints, and export
//! inducing points. Progress and results are emitted as one JSON object per
//! line on standard output; failures exit nonzero with a JSON error on
//! standard error.

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use congp::config::ExperimentConfig;
use congp::eval::{accuracy, export_inducing, normalized_entropy, predict_proba};
use congp::runner::{build_stream, run, RunEvent};
use congp::{checkpoint, Real, Result};

/// ChaCha20 stream for the ad-hoc `eval` subcommand's pass over task `t`.
const ADHOC_EVAL_STREAM_BASE: u64 = 3000;

#[derive(Parser)]
#[command(name = "congp", version, about = "Continual-learning Gaussian-process classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured benchmark end to end, checkpointing and
    /// reporting after every task; resumes from the newest checkpoint.
    Run { config: PathBuf },
    /// Evaluate a checkpointed state on the configured benchmark's test
    /// splits and print the per-task metrics.
    Eval { checkpoint: PathBuf, config: PathBuf },
    /// Export a checkpointed state's inducing points as CSV plus a manifest.
    DumpInducing { checkpoint: PathBuf, out_dir: PathBuf },
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn cmd_run(config_path: &PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let mut print_event = |event: &RunEvent| {
        println!("{}", serde_json::to_string(event).expect("events serialize"));
    };
    let artifacts = run(&cfg, Some(&mut print_event))?;
    emit(serde_json::json!({
        "event": "run_complete",
        "run_dir": artifacts.run_dir,
        "config_digest": cfg.digest(),
        "final_seen_mean": artifacts.report.seen_mean(artifacts.report.num_tasks() - 1),
    }));
    Ok(())
}

fn cmd_eval(checkpoint_path: &PathBuf, config_path: &PathBuf) -> Result<()> {
    let cfg = ExperimentConfig::load(config_path)?;
    let (state, stored_report) = checkpoint::load(checkpoint_path)?;
    let stream = build_stream(&cfg)?;
    let completed = state.completed_tasks().min(stream.tasks.len());
    let mut acc = Vec::new();
    let mut ent = Vec::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        rng.set_stream(ADHOC_EVAL_STREAM_BASE + t as u64);
        let probs = predict_proba(&state, task.x_test.view(), cfg.num_eval_samples, &mut rng)?;
        ent.push(normalized_entropy(probs.view()));
        if t < completed {
            acc.push(accuracy(probs.view(), &task.y_test));
        }
    }
    let seen_mean = acc.iter().sum::<Real>() / acc.len().max(1) as Real;
    emit(serde_json::json!({
        "event": "eval",
        "checkpoint": checkpoint_path,
        "completed_tasks": state.completed_tasks(),
        "accuracy_seen": acc,
        "entropy_all": ent,
        "seen_mean": seen_mean,
        "config_digest": cfg.digest(),
        "checkpoint_digest": stored_report.map(|r| r.config_digest),
    }));
    Ok(())
}

fn cmd_dump(checkpoint_path: &PathBuf, out_dir: &PathBuf) -> Result<()> {
    let (state, _) = checkpoint::load(checkpoint_path)?;
    let paths = export_inducing(&state, out_dir)?;
    emit(serde_json::json!({
        "event": "dump_inducing",
        "files": paths,
        "manifest": out_dir.join("manifest.json"),
    }));
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { config } => cmd_run(config),
        Command::Eval { checkpoint, config } => cmd_eval(checkpoint, config),
        Command::DumpInducing { checkpoint, out_dir } => cmd_dump(checkpoint, out_dir),
    };
    if let Err(err) = outcome {
        eprintln!("{}", serde_json::json!({ "error": err.to_string() }));
        std::process::exit(1);
    }
}
