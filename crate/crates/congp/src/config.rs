//! Experiment configuration: a single flat JSON document selecting the
//! benchmark, the bound variant, and the training hyperparameters.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Which task stream to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    /// Two tasks of 2-D Gaussian blobs, four classes.
    Toy,
    /// Five tasks of MNIST digit pairs 0/1 … 8/9, single-head 10-way.
    SplitMnist,
    /// T tasks of pixel-permuted MNIST, 10-way each.
    PermutedMnist,
}

/// Which lower bound drives training (and which posterior structure the
/// trained state uses at prediction time).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Auto-regressive variational posterior across task blocks (the full
    /// method).
    Vargp,
    /// Ablation: independent per-task posterior blocks (no cross-task mean
    /// coupling); the divergence term must sample earlier inducing values.
    BlockDiag,
    /// Ablation: a single inducing block replaced at every task, with a
    /// sampled correction tying it to the previous task's posterior.
    Global,
    /// Ablation: point-estimated kernel hyperparameters (no hyper posterior,
    /// no hyper KL).
    MleHypers,
}

impl Variant {
    /// Hyperparameters are a point estimate rather than a distribution.
    pub fn point_hypers(self) -> bool {
        matches!(self, Variant::MleHypers)
    }
}

fn default_theta_samples() -> usize {
    3
}

fn default_eval_samples() -> usize {
    10
}

fn default_val_subset_cap() -> usize {
    256
}

/// One experiment, one file. Flat keys so configs stay diffable.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub benchmark: Benchmark,
    pub variant: Variant,
    pub seed: u64,

    // training
    pub eta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub tolerance: f64,
    pub beta: f64,
    pub num_inducing: usize,
    #[serde(default = "default_theta_samples")]
    pub num_theta_samples: usize,
    #[serde(default = "default_eval_samples")]
    pub num_eval_samples: usize,
    #[serde(default)]
    pub tied_lengthscales: bool,
    /// Fan the per-sample bound evaluations out over threads. Results are
    /// bitwise identical either way (fixed-order reduction); off by default.
    #[serde(default)]
    pub parallel: bool,

    // data
    /// Directory holding the IDX files (ignored by the toy benchmark).
    /// Overridden by the `CONGP_DATA_DIR` environment variable.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Total validation examples carved out of training, spread over tasks
    /// proportionally to task size. Zero means no validation split; early
    /// stopping then tracks a seeded training subset.
    #[serde(default)]
    pub val_total: usize,
    /// Cap on per-task training examples (uniform seeded subsample), applied
    /// after the stream is built. Intended for desk-scale runs.
    #[serde(default)]
    pub train_cap: Option<usize>,
    /// Cap on per-task test examples, as above.
    #[serde(default)]
    pub test_cap: Option<usize>,
    /// Early-stopping validation fallback: when a task has no validation
    /// split, accuracy is tracked on a seeded training subset of this size.
    #[serde(default = "default_val_subset_cap")]
    pub val_subset_cap: usize,
    /// Number of tasks for the permuted benchmark (fixed to 2 for toy and 5
    /// for split).
    #[serde(default)]
    pub num_tasks: Option<usize>,

    pub output_dir: PathBuf,
}

/// Published search-space bounds; configs outside them draw a warning but
/// are never altered.
const ETA_RANGE: (f64, f64) = (0.001, 0.01);
const INDUCING_RANGE: (usize, usize) = (40, 200);
const BETA_RANGE: (f64, f64) = (1.0, 10.0);
const MAX_EPOCHS_CEIL: usize = 500;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hard validation of structural fields.
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive, got {}", self.eta)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs, and patience must all be ≥ 1".into(),
            ));
        }
        if self.tolerance < 0.0 {
            return Err(Error::Config("tolerance must be ≥ 0".into()));
        }
        if self.beta <= 0.0 || !self.beta.is_finite() {
            return Err(Error::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.num_inducing == 0 {
            return Err(Error::Config("num_inducing must be ≥ 1".into()));
        }
        if self.num_theta_samples == 0 || self.num_eval_samples == 0 {
            return Err(Error::Config("sample counts must be ≥ 1".into()));
        }
        if let (Benchmark::PermutedMnist, Some(0)) = (self.benchmark, self.num_tasks) {
            return Err(Error::Config("num_tasks must be ≥ 1".into()));
        }
        Ok(())
    }

    /// Soft range checks against the published search space. Returns
    /// human-readable warnings; values are used as given.
    pub fn range_warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.eta < ETA_RANGE.0 || self.eta > ETA_RANGE.1 {
            w.push(format!(
                "eta {} outside the published range [{}, {}]",
                self.eta, ETA_RANGE.0, ETA_RANGE.1
            ));
        }
        if self.num_inducing < INDUCING_RANGE.0 || self.num_inducing > INDUCING_RANGE.1 {
            w.push(format!(
                "num_inducing {} outside the published range [{}, {}]",
                self.num_inducing, INDUCING_RANGE.0, INDUCING_RANGE.1
            ));
        }
        if self.beta < BETA_RANGE.0 || self.beta > BETA_RANGE.1 {
            w.push(format!(
                "beta {} outside the published range [{}, {}]",
                self.beta, BETA_RANGE.0, BETA_RANGE.1
            ));
        }
        if self.max_epochs > MAX_EPOCHS_CEIL {
            w.push(format!(
                "max_epochs {} above the published ceiling {}",
                self.max_epochs, MAX_EPOCHS_CEIL
            ));
        }
        w
    }

    /// Stable digest of the full effective configuration; distinguishes
    /// output artifacts of different configs.
    pub fn digest(&self) -> String {
        // hash the experiment's identity, not where it reads or writes files
        let mut identity = self.clone();
        identity.data_dir = None;
        identity.output_dir = PathBuf::new();
        let canonical = serde_json::to_string(&identity).expect("config serializes");
        let hash = Sha256::digest(canonical.as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Number of tasks the benchmark produces.
    pub fn task_count(&self) -> usize {
        match self.benchmark {
            Benchmark::Toy => 2,
            Benchmark::SplitMnist => 5,
            Benchmark::PermutedMnist => self.num_tasks.unwrap_or(10),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ExperimentConfig {
        ExperimentConfig {
            benchmark: Benchmark::Toy,
            variant: Variant::Vargp,
            seed: 7,
            eta: 0.003,
            batch_size: 512,
            max_epochs: 50,
            patience: 8,
            tolerance: 1e-4,
            beta: 1.0,
            num_inducing: 40,
            num_theta_samples: 3,
            num_eval_samples: 10,
            tied_lengthscales: false,
            parallel: false,
            data_dir: None,
            val_total: 0,
            train_cap: None,
            test_cap: None,
            val_subset_cap: 256,
            num_tasks: None,
            output_dir: PathBuf::from("/tmp/out"),
        }
    }

    #[test]
    fn round_trips_through_json_with_defaults() {
        let text = r#"{
            "benchmark": "split_mnist", "variant": "block_diag", "seed": 1,
            "eta": 0.003, "batch_size": 512, "max_epochs": 50, "patience": 8,
            "tolerance": 0.0001, "beta": 10.0, "num_inducing": 60,
            "output_dir": "/tmp/x"
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert_eq!(cfg.benchmark, Benchmark::SplitMnist);
        assert_eq!(cfg.variant, Variant::BlockDiag);
        assert_eq!(cfg.num_theta_samples, 3);
        assert_eq!(cfg.num_eval_samples, 10);
        assert!(!cfg.parallel);
        cfg.validate().unwrap();
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let text = r#"{ "benchmark": "toy", "variant": "vargp", "typo_field": 1 }"#;
        assert!(serde_json::from_str::<ExperimentConfig>(text).is_err());
        let mut cfg = base();
        cfg.eta = -1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = base();
        cfg.beta = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn warns_outside_published_ranges_without_clamping() {
        let mut cfg = base();
        cfg.eta = 0.02;
        cfg.num_inducing = 20;
        cfg.beta = 0.5;
        let warnings = cfg.range_warnings();
        assert_eq!(warnings.len(), 3);
        assert_eq!(cfg.eta, 0.02, "warning must not change the value");
        assert!(base().range_warnings().is_empty());
    }

    #[test]
    fn digest_distinguishes_configs_and_is_stable() {
        let a = base();
        let mut b = base();
        assert_eq!(a.digest(), b.digest());
        b.seed = 8;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
    }
}
