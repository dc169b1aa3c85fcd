//! Posterior-predictive evaluation: Monte-Carlo class probabilities, the
//! task-by-task accuracy and normalized-entropy matrices, and inducing-point
//! export for inspection.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use congp_core::kernel::HyperParams;
use congp_core::Real;

use crate::data::TaskStream;
use crate::model::{predictive_marginals, ContinualState};
use crate::{Error, Result};

/// Monte-Carlo posterior-predictive class probabilities, one row per query
/// point. Per sample: a θ draw from the hyperparameter posterior (its mean
/// under point hyperparameters, consuming no randomness), predictive
/// marginals, one latent draw per point per class, softmax; the returned
/// matrix averages the per-sample probability vectors. Draw order per
/// sample: θ (H values), then latent noise row-major (P×K).
pub fn predict_proba(
    state: &ContinualState,
    xstar: ArrayView2<Real>,
    num_samples: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Array2<Real>> {
    if num_samples == 0 {
        return Err(Error::InvalidOperation(
            "need at least one predictive sample".into(),
        ));
    }
    if xstar.nrows() == 0 {
        return Err(Error::InvalidOperation("empty query matrix".into()));
    }
    let rows = xstar.nrows();
    let k = state.num_classes();
    let h = state.hyper_dim();
    let mut acc = Array2::<Real>::zeros((rows, k));
    for _ in 0..num_samples {
        let theta = if state.point_hypers() {
            HyperParams::from_theta(state.hyper_q().mean())?
        } else {
            let mut eps = Array1::zeros(h);
            for v in eps.iter_mut() {
                *v = StandardNormal.sample(rng);
            }
            let draw = state.hyper_q().sample_reparam(eps.view())?;
            HyperParams::from_theta(draw.view())?
        };
        let (means, vars) = predictive_marginals(state, &theta, xstar)?;
        for i in 0..rows {
            // logits for point i, then a stable softmax
            let mut logits = vec![0.0; k];
            for (j, l) in logits.iter_mut().enumerate() {
                let eps: Real = StandardNormal.sample(rng);
                *l = means[(i, j)] + vars[(i, j)].sqrt() * eps;
            }
            let top = logits.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let mut denom = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - top).exp();
                denom += *l;
            }
            for (j, l) in logits.iter().enumerate() {
                acc[(i, j)] += l / denom;
            }
        }
    }
    acc.mapv_inplace(|v| v / num_samples as Real);
    for (i, row) in acc.rows().into_iter().enumerate() {
        let sum: Real = row.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidOperation(format!(
                "probability row {i} sums to {sum}"
            )));
        }
    }
    Ok(acc)
}

/// Most probable class per row; ties break toward the lowest class index.
pub fn classify(probs: ArrayView2<Real>) -> Array1<usize> {
    Array1::from_iter(probs.rows().into_iter().map(|row| {
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        best
    }))
}

/// Fraction of rows whose classification matches the label.
pub fn accuracy(probs: ArrayView2<Real>, labels: &Array1<usize>) -> Real {
    let preds = classify(probs);
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as Real / labels.len().max(1) as Real
}

/// Mean normalized predictive entropy of the MC-averaged probabilities:
/// −Σ_k p_k ln p_k / ln K, averaged over rows, so 1 means a uniform
/// predictor.
pub fn normalized_entropy(probs: ArrayView2<Real>) -> Real {
    let k = probs.ncols() as Real;
    let norm = k.ln();
    let mut total = 0.0;
    for row in probs.rows() {
        let mut h = 0.0;
        for &p in row {
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        total += h / norm;
    }
    total / probs.nrows().max(1) as Real
}

mod nan_matrix {
    //! JSON has no NaN literal; unfilled cells serialize as `null` and read
    //! back as NaN.
    use super::Real;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &[Vec<Real>], s: S) -> Result<S::Ok, S::Error> {
        let wrapped: Vec<Vec<Option<Real>>> = m
            .iter()
            .map(|row| row.iter().map(|&v| (!v.is_nan()).then_some(v)).collect())
            .collect();
        wrapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Vec<Real>>, D::Error> {
        let wrapped: Vec<Vec<Option<Real>>> = Deserialize::deserialize(d)?;
        Ok(wrapped
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.unwrap_or(Real::NAN)).collect())
            .collect())
    }
}

/// Task-wise evaluation matrices. Row `t` is written once, immediately after
/// task `t` finishes training: accuracy over the tasks seen so far (columns
/// 0..=t; later columns stay unfilled), normalized entropy over every task
/// including unseen ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// T×T; row = tasks trained, column = task evaluated; unfilled = NaN.
    #[serde(with = "nan_matrix")]
    pub accuracy: Vec<Vec<Real>>,
    /// T×T normalized mean predictive entropy, every column filled per row.
    #[serde(with = "nan_matrix")]
    pub entropy: Vec<Vec<Real>>,
    /// Test points per task.
    pub per_task_n: Vec<usize>,
    pub seed: u64,
    pub config_digest: String,
}

impl EvalReport {
    pub fn new(stream: &TaskStream, seed: u64, config_digest: String) -> Self {
        let t = stream.tasks.len();
        EvalReport {
            accuracy: vec![vec![Real::NAN; t]; t],
            entropy: vec![vec![Real::NAN; t]; t],
            per_task_n: stream.tasks.iter().map(|task| task.x_test.nrows()).collect(),
            seed,
            config_digest,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.accuracy.len()
    }

    pub fn row_filled(&self, t: usize) -> bool {
        t < self.num_tasks() && !self.accuracy[t][0].is_nan()
    }

    /// Mean accuracy over the tasks seen after training task `t`.
    pub fn seen_mean(&self, t: usize) -> Real {
        let row = &self.accuracy[t];
        row[..=t].iter().sum::<Real>() / (t + 1) as Real
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Evaluates the freshly trained state on every task's test split and writes
/// row `after_task` of the report: accuracy for seen tasks (columns
/// 0..=after_task), entropy for all tasks. Rows are write-once.
pub fn update_report(
    report: &mut EvalReport,
    state: &ContinualState,
    stream: &TaskStream,
    after_task: usize,
    num_samples: usize,
    rng: &mut ChaCha20Rng,
) -> Result<()> {
    let t_count = stream.tasks.len();
    if report.num_tasks() != t_count {
        return Err(Error::InvalidOperation(format!(
            "report covers {} tasks, stream has {t_count}",
            report.num_tasks()
        )));
    }
    if after_task >= t_count {
        return Err(Error::InvalidOperation(format!(
            "task index {after_task} out of range [0, {t_count})"
        )));
    }
    if report.row_filled(after_task) {
        return Err(Error::InvalidOperation(format!(
            "report row {after_task} is already finalized"
        )));
    }
    for (j, task) in stream.tasks.iter().enumerate() {
        let probs = predict_proba(state, task.x_test.view(), num_samples, rng)?;
        report.entropy[after_task][j] = normalized_entropy(probs.view());
        if j <= after_task {
            report.accuracy[after_task][j] = accuracy(probs.view(), &task.y_test);
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct InducingManifestEntry {
    file: String,
    rows: usize,
    cols: usize,
    frozen: bool,
}

/// Writes each block's inducing inputs as `inducing_task_{i}.csv` (one row
/// per point, decimal with 17 significant digits so a reader recovers the
/// exact values) plus a `manifest.json` of shapes. Returns the CSV paths.
pub fn export_inducing(state: &ContinualState, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if state.num_blocks() == 0 {
        return Err(Error::InvalidOperation("state has no inducing blocks".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    let mut manifest = Vec::new();
    for (i, block) in state.blocks().iter().enumerate() {
        let name = format!("inducing_task_{i}.csv");
        let path = out_dir.join(&name);
        let mut text = String::new();
        for row in block.z().rows() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            text.push_str(&cells.join(","));
            text.push('\n');
        }
        fs::write(&path, text)?;
        manifest.push(InducingManifestEntry {
            file: name,
            rows: block.z().nrows(),
            cols: block.z().ncols(),
            frozen: block.frozen(),
        });
        paths.push(path);
    }
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_toy;
    use crate::model::Coupling;
    use approx::assert_abs_diff_eq;
    use congp_core::gaussian::DiagGaussian;
    use ndarray::array;
    use rand::SeedableRng;

    fn near_deterministic_uniform_state(k: usize) -> ContinualState {
        // point hyperparameters, a tiny kernel scale, zero variational means,
        // and a collapsed variational covariance force every logit to ≈0, so
        // each probability row is 1/K up to ~1e-6
        let mut state =
            ContinualState::new(1, k, Coupling::AutoRegressive, false, true).unwrap();
        let z = array![[0.0], [1.0]];
        state.append_task(z.clone()).unwrap();
        state
            .last_block_mut()
            .unwrap()
            .set_params(
                z,
                Array2::zeros((2, k)),
                vec![Array2::from_diag_elem(2, -40.0); k],
            )
            .unwrap();
        state
            .set_hyper_q(DiagGaussian::new(array![0.0, -30.0], array![-2.0, -2.0]).unwrap())
            .unwrap();
        state
    }

    #[test]
    fn collapsed_logits_predict_uniformly() {
        let state = near_deterministic_uniform_state(10);
        let x = array![[0.3], [0.9], [-1.0]];
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let probs = predict_proba(&state, x.view(), 4, &mut rng).unwrap();
        for row in probs.rows() {
            for &p in row {
                assert_abs_diff_eq!(p, 0.1, epsilon = 1e-6);
            }
        }
        assert_abs_diff_eq!(normalized_entropy(probs.view()), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn probability_rows_sum_to_one_on_a_generic_state() {
        let mut state =
            ContinualState::new(2, 4, Coupling::AutoRegressive, false, false).unwrap();
        state.append_task(array![[0.0, 0.0], [1.0, -0.5], [0.3, 0.8]]).unwrap();
        state
            .last_block_mut()
            .unwrap()
            .set_params(
                array![[0.0, 0.0], [1.0, -0.5], [0.3, 0.8]],
                array![[0.5, -1.0, 0.2, 0.0], [1.5, 0.3, -0.7, 0.1], [-0.2, 0.8, 0.4, -0.9]],
                vec![
                    {
                        let mut r = Array2::zeros((3, 3));
                        r[(0, 0)] = 0.2;
                        r[(1, 1)] = -0.1;
                        r[(2, 2)] = 0.5;
                        r[(1, 0)] = 0.3;
                        r
                    },
                    Array2::from_elem((3, 3), 0.1),
                    {
                        let mut r = Array2::zeros((3, 3));
                        r[(0, 0)] = crate::model::RAW_UNIT_DIAG;
                        r[(1, 1)] = crate::model::RAW_UNIT_DIAG;
                        r[(2, 2)] = crate::model::RAW_UNIT_DIAG;
                        r
                    },
                    Array2::from_elem((3, 3), -0.2),
                ],
            )
            .unwrap();
        let x = array![[0.1, 0.2], [0.9, -0.3], [2.0, 2.0], [-3.0, 1.0]];
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let probs = predict_proba(&state, x.view(), 6, &mut rng).unwrap();
        for row in probs.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-9);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn classify_breaks_ties_toward_the_lowest_index() {
        let probs = array![
            [0.0, 1.0, 0.0],
            [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            [0.2, 0.5, 0.3]
        ];
        let labels = classify(probs.view());
        assert_eq!(labels.to_vec(), vec![1, 0, 1]);
    }

    #[test]
    fn classify_is_invariant_to_monotone_rescaling() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let raw = Array2::from_shape_fn((20, 5), |_| {
            let v: Real = StandardNormal.sample(&mut rng);
            v.exp()
        });
        let cubed = raw.mapv(|p| p.powi(3));
        assert_eq!(classify(raw.view()), classify(cubed.view()));
    }

    #[test]
    fn report_rows_fill_once_with_the_expected_pattern() {
        let stream = gen_toy(11);
        let mut state =
            ContinualState::new(2, 4, Coupling::AutoRegressive, false, false).unwrap();
        state.append_task(array![[0.0, 0.0], [1.0, 1.0]]).unwrap();
        let mut report = EvalReport::new(&stream, 11, "digest".into());
        assert_eq!(report.per_task_n, vec![40, 40]);
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        update_report(&mut report, &state, &stream, 0, 2, &mut rng).unwrap();
        assert!(report.accuracy[0][0].is_finite());
        assert!(report.accuracy[0][1].is_nan(), "unseen task stays unfilled");
        assert!(report.entropy[0][0].is_finite());
        assert!(report.entropy[0][1].is_finite(), "entropy covers unseen tasks");
        assert!(report.accuracy[1][0].is_nan(), "later rows untouched");
        assert!(report.row_filled(0));
        assert!(!report.row_filled(1));
        let again = update_report(&mut report, &state, &stream, 0, 2, &mut rng);
        assert!(again.is_err(), "rows are write-once");
    }

    #[test]
    fn report_json_round_trips_with_null_cells() {
        let stream = gen_toy(4);
        let mut report = EvalReport::new(&stream, 4, "abcd".into());
        report.accuracy[0][0] = 0.75;
        report.entropy[0][0] = 0.5;
        report.entropy[0][1] = 1.0;
        let text = report.to_json().unwrap();
        assert!(text.contains("null"), "unfilled cells appear as null");
        let back = EvalReport::from_json(&text).unwrap();
        assert_eq!(back.accuracy[0][0], 0.75);
        assert!(back.accuracy[0][1].is_nan());
        assert!(back.accuracy[1][1].is_nan());
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn inducing_export_round_trips_exactly() {
        let mut state =
            ContinualState::new(2, 4, Coupling::AutoRegressive, false, false).unwrap();
        state
            .append_task(array![[0.123456789012345, -2.5], [1.0 / 3.0, 1e-7]])
            .unwrap();
        state.freeze_last().unwrap();
        state.append_task(array![[0.5, 0.5]]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = export_inducing(&state, dir.path()).unwrap();
        assert_eq!(paths.len(), 2);
        let text = fs::read_to_string(&paths[0]).unwrap();
        let mut values = Vec::new();
        for line in text.lines() {
            for cell in line.split(',') {
                values.push(cell.parse::<Real>().unwrap());
            }
        }
        let expect = state.blocks()[0].z();
        assert_eq!(values, expect.iter().copied().collect::<Vec<_>>());
        let manifest = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(parsed.as_array().unwrap().len(), 2);
        assert_eq!(parsed[0]["rows"], 2);
        assert_eq!(parsed[1]["frozen"], false);
    }

    #[test]
    fn predict_proba_is_deterministic_per_rng_state() {
        let state = near_deterministic_uniform_state(4);
        let x = array![[0.5], [0.1]];
        let a = predict_proba(&state, x.view(), 3, &mut ChaCha20Rng::seed_from_u64(8))
            .unwrap();
        let b = predict_proba(&state, x.view(), 3, &mut ChaCha20Rng::seed_from_u64(8))
            .unwrap();
        assert_eq!(a, b);
    }
}
