//! Continual-learning Gaussian-process classification.
//!
//! A classifier that learns a sequence of tasks without revisiting old data.
//! Each task contributes a block of sparse-GP inducing points; the
//! variational posterior over all blocks is auto-regressive — each new block
//! is conditioned on the previous ones through the GP prior — so the joint
//! posterior over every task's inducing values stays in closed form. Kernel
//! hyperparameters carry their own Gaussian posterior, regularized from task
//! to task by a tempered KL term.
//!
//! Modules:
//! - [`model`]: posterior state, prior conditionals, the closed-form
//!   variational joint, predictive marginals.
//! - [`objective`]: the per-task evidence lower bounds (first task,
//!   continual, and the block-diagonal / global-replacement / point-hyper
//!   ablation variants) with reparametrized Monte-Carlo gradients.
//! - [`optim`] / [`trainer`]: Yogi optimizer and the per-task training loop
//!   with early stopping on validation accuracy.
//! - [`data`]: toy blobs, IDX image ingestion, split/permuted task streams.
//! - [`eval`]: posterior-predictive classification, the accuracy/entropy
//!   report matrices, inducing-point export.
//! - [`checkpoint`] / [`config`] / [`runner`]: persistence and experiment
//!   orchestration behind the `congp` binary.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod objective;
pub mod optim;
pub mod runner;
pub mod trainer;

pub use congp_core::Real;

/// Unified error type for the experiment harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] congp_core::Error),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON encoding failure: {0}")]
    Json(#[from] serde_json::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training aborted: {0}")]
    Training(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid operation: {0}")]
    InvalidOperation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
