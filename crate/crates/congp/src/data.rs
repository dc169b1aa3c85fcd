//! Task-stream construction: synthetic 2-D blobs, IDX image ingestion, and
//! the split/permuted benchmark streams with validation carve-outs.
//!
//! Randomness is drawn from dedicated ChaCha20 streams of the run seed so
//! that data construction, training, and evaluation never share state:
//! stream 0 builds task streams, stream 1 applies desk-scale caps (training
//! uses 1000+t, evaluation 2000+t; see the trainer and runner).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::{Error, Real, Result};

/// ChaCha20 stream used by the task-stream constructors.
pub const DATA_STREAM: u64 = 0;
/// ChaCha20 stream used by desk-scale subsampling caps.
pub const CAP_STREAM: u64 = 1;

/// One task's train/validation/test splits. The validation split may be
/// empty (zero rows); the trainer then falls back to a training subset for
/// early stopping.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub task_id: usize,
    pub x_train: Array2<Real>,
    pub y_train: Array1<usize>,
    pub x_val: Array2<Real>,
    pub y_val: Array1<usize>,
    pub x_test: Array2<Real>,
    pub y_test: Array1<usize>,
    /// Pixel-index bijection applied to this task's features (permuted
    /// benchmark only).
    pub permutation: Option<Vec<usize>>,
}

impl TaskDataset {
    pub fn input_dim(&self) -> usize {
        self.x_train.ncols()
    }

    pub fn has_val(&self) -> bool {
        self.x_val.nrows() > 0
    }

    pub(crate) fn check(&self, num_classes: usize) -> Result<()> {
        for (name, x, y) in [
            ("train", &self.x_train, &self.y_train),
            ("val", &self.x_val, &self.y_val),
            ("test", &self.x_test, &self.y_test),
        ] {
            if x.nrows() != y.len() {
                return Err(Error::Data(format!(
                    "task {}: {name} has {} rows but {} labels",
                    self.task_id,
                    x.nrows(),
                    y.len()
                )));
            }
            if x.ncols() != self.x_train.ncols() {
                return Err(Error::Data(format!(
                    "task {}: {name} feature dimension differs",
                    self.task_id
                )));
            }
            if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
                return Err(Error::Data(format!(
                    "task {}: {name} label {bad} outside [0, {num_classes})",
                    self.task_id
                )));
            }
        }
        if let Some(p) = &self.permutation {
            let mut seen = vec![false; p.len()];
            if p.len() != self.x_train.ncols() {
                return Err(Error::Data("permutation length differs from D".into()));
            }
            for &i in p {
                if i >= p.len() || seen[i] {
                    return Err(Error::Data("permutation is not a bijection".into()));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// An ordered sequence of tasks sharing one label space.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub num_classes: usize,
    pub input_dim: usize,
}

pub(crate) fn take_rows(x: &Array2<Real>, y: &Array1<usize>, idx: &[usize]) -> (Array2<Real>, Array1<usize>) {
    let cols = x.ncols();
    let mut xs = Array2::zeros((idx.len(), cols));
    let mut ys = Array1::zeros(idx.len());
    for (r, &i) in idx.iter().enumerate() {
        xs.row_mut(r).assign(&x.row(i));
        ys[r] = y[i];
    }
    (xs, ys)
}

/// Largest-remainder apportionment of `total` across `weights`, exact sum.
fn apportion(total: usize, weights: &[usize]) -> Vec<usize> {
    let wsum: usize = weights.iter().sum();
    if wsum == 0 {
        return vec![0; weights.len()];
    }
    let quota: Vec<f64> = weights.iter().map(|&w| total as f64 * w as f64 / wsum as f64).collect();
    let mut take: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quota[a] - take[a] as f64;
        let fb = quota[b] - take[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut leftover = total - take.iter().sum::<usize>();
    for &i in &order {
        if leftover == 0 {
            break;
        }
        take[i] += 1;
        leftover -= 1;
    }
    take
}

// ---------------------------------------------------------------------------
// Toy blobs
// ---------------------------------------------------------------------------

const TOY_CENTERS: [(f64, f64); 4] = [(-1.5, -1.5), (1.5, 1.5), (-1.5, 1.5), (1.5, -1.5)];
const TOY_SIGMA: f64 = 0.4;
const TOY_PER_CLASS: usize = 100;

/// Two-task synthetic stream: four isotropic Gaussian blobs (σ = 0.4, 100
/// points each) at alternating corners, clipped to [−3, 3]²; task 0 carries
/// classes {0, 1}, task 1 carries {2, 3}; 80/20 train/test per class and no
/// separate validation split.
pub fn gen_toy(seed: u64) -> TaskStream {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);

    // Draw class-major, point-major, coordinate-major.
    let mut xs = Vec::with_capacity(4 * TOY_PER_CLASS);
    for (cx, cy) in TOY_CENTERS {
        for _ in 0..TOY_PER_CLASS {
            let dx: f64 = StandardNormal.sample(&mut rng);
            let dy: f64 = StandardNormal.sample(&mut rng);
            let px = (cx + TOY_SIGMA * dx).clamp(-3.0, 3.0);
            let py = (cy + TOY_SIGMA * dy).clamp(-3.0, 3.0);
            xs.push([px, py]);
        }
    }

    let mut tasks = Vec::new();
    for (task_id, classes) in [(0usize, [0usize, 1]), (1, [2, 3])] {
        let mut train_rows = Vec::new();
        let mut test_rows = Vec::new();
        for &c in &classes {
            let mut order: Vec<usize> = (0..TOY_PER_CLASS).collect();
            order.shuffle(&mut rng);
            let cut = TOY_PER_CLASS * 4 / 5;
            for (pos, &i) in order.iter().enumerate() {
                let row = c * TOY_PER_CLASS + i;
                if pos < cut {
                    train_rows.push((row, c));
                } else {
                    test_rows.push((row, c));
                }
            }
        }
        let build = |rows: &[(usize, usize)]| {
            let mut x = Array2::zeros((rows.len(), 2));
            let mut y = Array1::zeros(rows.len());
            for (r, &(i, c)) in rows.iter().enumerate() {
                x[(r, 0)] = xs[i][0];
                x[(r, 1)] = xs[i][1];
                y[r] = c;
            }
            (x, y)
        };
        let (x_train, y_train) = build(&train_rows);
        let (x_test, y_test) = build(&test_rows);
        tasks.push(TaskDataset {
            task_id,
            x_train,
            y_train,
            x_val: Array2::zeros((0, 2)),
            y_val: Array1::zeros(0),
            x_test,
            y_test,
            permutation: None,
        });
    }
    TaskStream { tasks, num_classes: 4, input_dim: 2 }
}

// ---------------------------------------------------------------------------
// IDX ingestion
// ---------------------------------------------------------------------------

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(buf: &[u8], off: usize, what: &str) -> Result<u32> {
    let bytes = buf
        .get(off..off + 4)
        .ok_or_else(|| Error::Data(format!("truncated IDX file while reading {what}")))?;
    Ok(u32::from_be_bytes(bytes.try_into().unwrap()))
}

/// Loads a big-endian IDX image/label file pair: pixels scaled to [0, 1] by
/// division by 255, images flattened row-major to N×784.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<(Array2<Real>, Array1<usize>)> {
    let img = fs::read(images_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", images_path.display())))?;
    let lab = fs::read(labels_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", labels_path.display())))?;

    let magic = read_u32_be(&img, 0, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Data(format!(
            "bad images magic {magic:#010x} in {} (want {IDX_IMAGES_MAGIC:#010x})",
            images_path.display()
        )));
    }
    let n = read_u32_be(&img, 4, "image count")? as usize;
    let rows = read_u32_be(&img, 8, "rows")? as usize;
    let cols = read_u32_be(&img, 12, "cols")? as usize;
    let pixels = n * rows * cols;
    if img.len() != 16 + pixels {
        return Err(Error::Data(format!(
            "truncated images file {}: header promises {} bytes, found {}",
            images_path.display(),
            16 + pixels,
            img.len()
        )));
    }

    let magic = read_u32_be(&lab, 0, "labels magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Data(format!(
            "bad labels magic {magic:#010x} in {} (want {IDX_LABELS_MAGIC:#010x})",
            labels_path.display()
        )));
    }
    let n_lab = read_u32_be(&lab, 4, "label count")? as usize;
    if lab.len() != 8 + n_lab {
        return Err(Error::Data(format!(
            "truncated labels file {}: header promises {} bytes, found {}",
            labels_path.display(),
            8 + n_lab,
            lab.len()
        )));
    }
    if n != n_lab {
        return Err(Error::Data(format!(
            "image/label count mismatch: {n} images vs {n_lab} labels"
        )));
    }

    let d = rows * cols;
    let mut x = Array2::zeros((n, d));
    for i in 0..n {
        for j in 0..d {
            x[(i, j)] = img[16 + i * d + j] as Real / 255.0;
        }
    }
    let y = Array1::from_iter(lab[8..].iter().map(|&b| b as usize));
    Ok((x, y))
}

// ---------------------------------------------------------------------------
// Benchmark streams
// ---------------------------------------------------------------------------

/// Splits digit data into 5 tasks of label pairs {2t, 2t+1}, keeping the full
/// 10-way label space (single head). `val_total` examples are removed from
/// training cumulatively across tasks, proportional to task sizes; train+val
/// partition the original training rows exactly. Test rows of task t are all
/// test images labeled {2t, 2t+1}.
pub fn make_split_tasks(
    x_train: &Array2<Real>,
    y_train: &Array1<usize>,
    x_test: &Array2<Real>,
    y_test: &Array1<usize>,
    val_total: usize,
    seed: u64,
) -> Result<TaskStream> {
    for y in [y_train, y_test] {
        if let Some(&bad) = y.iter().find(|&&l| l > 9) {
            return Err(Error::Data(format!("label {bad} outside the 10-digit space")));
        }
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);

    let train_idx: Vec<Vec<usize>> = (0..5)
        .map(|t| {
            (0..y_train.len())
                .filter(|&i| y_train[i] / 2 == t)
                .collect()
        })
        .collect();
    let sizes: Vec<usize> = train_idx.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();
    if val_total > total {
        return Err(Error::Data(format!(
            "val_total {val_total} exceeds the {total} available training examples"
        )));
    }
    let val_take = apportion(val_total, &sizes);

    let mut tasks = Vec::new();
    for t in 0..5 {
        let mut order = train_idx[t].clone();
        order.shuffle(&mut rng);
        let (val_part, train_part) = order.split_at(val_take[t].min(order.len()));
        let mut train_rows = train_part.to_vec();
        let mut val_rows = val_part.to_vec();
        // keep original file order inside each split for reproducibility
        train_rows.sort_unstable();
        val_rows.sort_unstable();
        let (x_tr, y_tr) = take_rows(x_train, y_train, &train_rows);
        let (x_va, y_va) = take_rows(x_train, y_train, &val_rows);
        let test_rows: Vec<usize> =
            (0..y_test.len()).filter(|&i| y_test[i] / 2 == t).collect();
        let (x_te, y_te) = take_rows(x_test, y_test, &test_rows);
        tasks.push(TaskDataset {
            task_id: t,
            x_train: x_tr,
            y_train: y_tr,
            x_val: x_va,
            y_val: y_va,
            x_test: x_te,
            y_test: y_te,
            permutation: None,
        });
    }
    let input_dim = x_train.ncols();
    let stream = TaskStream { tasks, num_classes: 10, input_dim };
    for t in &stream.tasks {
        t.check(10)?;
    }
    Ok(stream)
}

/// T tasks over the same images with per-task pixel permutations: task 0 is
/// the identity, tasks 1..T−1 draw independent bijections of [0, D), applied
/// to train, validation, and test alike. Every task is the full 10-way
/// problem.
pub fn make_permuted_tasks(
    x_train: &Array2<Real>,
    y_train: &Array1<usize>,
    x_test: &Array2<Real>,
    y_test: &Array1<usize>,
    num_tasks: usize,
    val_total: usize,
    seed: u64,
) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::Data("need at least one task".into()));
    }
    if val_total > y_train.len() {
        return Err(Error::Data(format!(
            "val_total {val_total} exceeds the {} available training examples",
            y_train.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(DATA_STREAM);
    let d = x_train.ncols();
    let n = y_train.len();
    let val_take = apportion(val_total, &vec![n; num_tasks]);

    let permute_cols = |x: &Array2<Real>, perm: &[usize]| {
        let mut out = Array2::zeros(x.dim());
        for (src, &dst) in perm.iter().enumerate() {
            out.column_mut(dst).assign(&x.column(src));
        }
        out
    };

    let mut tasks = Vec::new();
    for t in 0..num_tasks {
        let perm: Option<Vec<usize>> = if t == 0 {
            None
        } else {
            let mut p: Vec<usize> = (0..d).collect();
            p.shuffle(&mut rng);
            Some(p)
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (val_part, train_part) = order.split_at(val_take[t]);
        let mut train_rows = train_part.to_vec();
        let mut val_rows = val_part.to_vec();
        train_rows.sort_unstable();
        val_rows.sort_unstable();
        let (mut x_tr, y_tr) = take_rows(x_train, y_train, &train_rows);
        let (mut x_va, y_va) = take_rows(x_train, y_train, &val_rows);
        let mut x_te = x_test.clone();
        if let Some(p) = &perm {
            x_tr = permute_cols(&x_tr, p);
            x_va = permute_cols(&x_va, p);
            x_te = permute_cols(&x_te, p);
        }
        tasks.push(TaskDataset {
            task_id: t,
            x_train: x_tr,
            y_train: y_tr,
            x_val: x_va,
            y_val: y_va,
            x_test: x_te,
            y_test: y_test.clone(),
            permutation: perm,
        });
    }
    let stream = TaskStream { tasks, num_classes: 10, input_dim: d };
    for t in &stream.tasks {
        t.check(10)?;
    }
    Ok(stream)
}

/// Desk-scale caps: uniform seeded subsample of each task's training and/or
/// test rows (original order kept). Validation splits are never capped.
pub fn apply_caps(
    stream: &mut TaskStream,
    train_cap: Option<usize>,
    test_cap: Option<usize>,
    seed: u64,
) {
    if train_cap.is_none() && test_cap.is_none() {
        return;
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(CAP_STREAM);
    let mut subsample = |x: &mut Array2<Real>, y: &mut Array1<usize>, cap: usize| {
        if y.len() <= cap {
            return;
        }
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.shuffle(&mut rng);
        let mut keep = order[..cap].to_vec();
        keep.sort_unstable();
        let (nx, ny) = take_rows(x, y, &keep);
        *x = nx;
        *y = ny;
    };
    for task in &mut stream.tasks {
        if let Some(cap) = train_cap {
            subsample(&mut task.x_train, &mut task.y_train, cap);
        }
        if let Some(cap) = test_cap {
            subsample(&mut task.x_test, &mut task.y_test, cap);
        }
    }
}

/// Most-frequent-training-label baseline accuracy on a test split.
pub fn label_frequency_baseline(y_train: &Array1<usize>, y_test: &Array1<usize>, num_classes: usize) -> f64 {
    let mut counts = vec![0usize; num_classes];
    for &l in y_train {
        counts[l] += 1;
    }
    let top = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    if y_test.is_empty() {
        return 0.0;
    }
    y_test.iter().filter(|&&l| l == top).count() as f64 / y_test.len() as f64
}

/// Concatenates feature matrices row-wise (used by cumulative evaluations).
pub fn vstack(parts: &[&Array2<Real>]) -> Array2<Real> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("column counts agree")
}
