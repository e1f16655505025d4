//! MNIST ingestion and task-sequence construction.

use std::fs;
use std::io::{Cursor, Read};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::check_labels;
use crate::tensor::Tensor2D;

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const MNIST_PIXELS: usize = 784;
pub const MNIST_CLASSES: usize = 10;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Fraction of each training pool kept for training; the rest is validation.
pub const TRAIN_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor2D,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(inputs: Tensor2D, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidArgument("empty labeled set".into()));
        }
        if inputs.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "LabeledSet::new",
                detail: format!("{} inputs, {} labels", inputs.rows(), labels.len()),
            });
        }
        check_labels(&labels, num_classes)?;
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(
            self.inputs.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_classes,
        )
    }

    /// Seeded shuffle, then slice: the first `fraction` goes to the first set.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * fraction).round() as usize;
        let cut = cut.clamp(1, self.len().saturating_sub(1).max(1));
        let (a, b) = idx.split_at(cut);
        Ok((self.subset(a)?, self.subset(b)?))
    }

    /// Applies a pixel permutation: output column `c` reads input column `perm[c]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let cols = self.inputs.cols();
        if perm.len() != cols {
            return Err(Error::ShapeMismatch {
                op: "LabeledSet::permuted",
                detail: format!("permutation of {} for {cols} columns", perm.len()),
            });
        }
        let mut out = Tensor2D::zeros(self.inputs.rows(), cols);
        for r in 0..self.inputs.rows() {
            let src = self.inputs.row(r);
            for (dst, &p) in out.row_mut(r).iter_mut().zip(perm) {
                *dst = src[p];
            }
        }
        Self::new(out, self.labels.clone(), self.num_classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Permuted,
    Split,
    Synthetic,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Permuted => "permuted",
            TaskKind::Split => "split",
            TaskKind::Synthetic => "synthetic",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "permuted" => Ok(TaskKind::Permuted),
            "split" => Ok(TaskKind::Split),
            "synthetic" => Ok(TaskKind::Synthetic),
            other => Err(format!("unknown dataset '{other}' (expected permuted, split or synthetic)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Task {
    pub train: LabeledSet,
    pub val: LabeledSet,
    pub test: LabeledSet,
}

#[derive(Clone, Debug)]
pub struct TaskSequence {
    pub tasks: Vec<Task>,
    pub kind: TaskKind,
    /// Pixel permutation per task (permuted sequences only).
    pub permutations: Vec<Vec<usize>>,
    /// Original digit labels per task (split sequences only).
    pub label_groups: Vec<Vec<usize>>,
}

impl TaskSequence {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.input_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.tasks[0].train.num_classes
    }

    /// Keeps the first `n` tasks.
    pub fn truncate(mut self, n: usize) -> Self {
        self.tasks.truncate(n);
        self.permutations.truncate(n);
        self.label_groups.truncate(n);
        self
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn count_mismatch(path: &Path, detail: String) -> Error {
    Error::CountMismatch {
        path: path.to_path_buf(),
        detail,
    }
}

fn read_header(cur: &mut Cursor<Vec<u8>>, path: &Path, expected: u32) -> Result<()> {
    let magic = cur
        .read_u32::<BigEndian>()
        .map_err(|_| count_mismatch(path, "file shorter than its header".into()))?;
    if magic != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected,
            found: magic,
        });
    }
    Ok(())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let mut images = Cursor::new(read_file(images_path)?);
    let mut labels = Cursor::new(read_file(labels_path)?);
    read_header(&mut images, images_path, IMAGE_MAGIC)?;
    read_header(&mut labels, labels_path, LABEL_MAGIC)?;

    let short = |p: &Path| count_mismatch(p, "header truncated".into());
    let n_images = images.read_u32::<BigEndian>().map_err(|_| short(images_path))? as usize;
    let rows = images.read_u32::<BigEndian>().map_err(|_| short(images_path))? as usize;
    let cols = images.read_u32::<BigEndian>().map_err(|_| short(images_path))? as usize;
    let n_labels = labels.read_u32::<BigEndian>().map_err(|_| short(labels_path))? as usize;
    if n_images != n_labels {
        return Err(count_mismatch(
            labels_path,
            format!("{n_images} images but {n_labels} labels"),
        ));
    }

    let pixels = rows * cols;
    let body = &images.get_ref()[16..];
    if body.len() != n_images * pixels {
        return Err(count_mismatch(
            images_path,
            format!(
                "header declares {n_images} images of {pixels} pixels, found {} bytes",
                body.len()
            ),
        ));
    }
    let label_body = &labels.get_ref()[8..];
    if label_body.len() != n_labels {
        return Err(count_mismatch(
            labels_path,
            format!(
                "header declares {n_labels} labels, found {} bytes",
                label_body.len()
            ),
        ));
    }

    let data = body.iter().map(|&b| f64::from(b) / 255.0).collect();
    let inputs = Tensor2D::new(n_images, pixels, data)?;
    let labels = label_body.iter().map(|&b| b as usize).collect();
    LabeledSet::new(inputs, labels, MNIST_CLASSES)
}

/// Expected MNIST file paths inside `dir`.
pub fn mnist_paths(dir: &Path) -> [PathBuf; 4] {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS].map(|f| dir.join(f))
}

/// Loads `(train, test)` from a directory holding the four standard files.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledSet, LabeledSet)> {
    let [ti, tl, si, sl] = mnist_paths(dir);
    Ok((load_mnist_idx(&ti, &tl)?, load_mnist_idx(&si, &sl)?))
}

/// Uniform random permutation of `0..n`.
pub fn random_permutation(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Task 0 is the unpermuted data; tasks `1..` apply independent pixel
/// permutations drawn from `seed`. Each task's train/val/test share its
/// permutation, and all tasks share one 90/10 train/validation split.
pub fn make_permuted_tasks(
    base: &LabeledSet,
    test: &LabeledSet,
    num_tasks: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if num_tasks == 0 {
        return Err(Error::InvalidArgument("num_tasks must be >= 1".into()));
    }
    let (train, val) = base.split(TRAIN_FRACTION, seed)?;
    let dim = base.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5045_524d_5554_4544);
    let mut permutations = vec![(0..dim).collect::<Vec<_>>()];
    for _ in 1..num_tasks {
        permutations.push(random_permutation(dim, &mut rng));
    }
    let tasks = permutations
        .iter()
        .map(|p| {
            Ok(Task {
                train: train.permuted(p)?,
                val: val.permuted(p)?,
                test: test.permuted(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence {
        tasks,
        kind: TaskKind::Permuted,
        permutations,
        label_groups: Vec::new(),
    })
}

fn select_labels(set: &LabeledSet, group: &[usize]) -> Result<LabeledSet> {
    let idx: Vec<usize> = (0..set.len())
        .filter(|&i| group.contains(&set.labels[i]))
        .collect();
    let picked = set.subset(&idx)?;
    let labels = picked
        .labels
        .iter()
        .map(|l| group.iter().position(|g| g == l).expect("filtered"))
        .collect();
    LabeledSet::new(picked.inputs, labels, group.len())
}

/// Five label-disjoint tasks over sequential digit pairs, labels remapped
/// to `{0, 1}` within each task.
pub fn make_split_tasks(base: &LabeledSet, test: &LabeledSet, seed: u64) -> Result<TaskSequence> {
    if base.num_classes != MNIST_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "split tasks need 10 classes, got {}",
            base.num_classes
        )));
    }
    let groups: Vec<Vec<usize>> = (0..5).map(|t| vec![2 * t, 2 * t + 1]).collect();
    let tasks = groups
        .iter()
        .enumerate()
        .map(|(t, g)| {
            let pool = select_labels(base, g)?;
            let (train, val) = pool.split(TRAIN_FRACTION, seed.wrapping_add(t as u64))?;
            Ok(Task {
                train,
                val,
                test: select_labels(test, g)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskSequence {
        tasks,
        kind: TaskKind::Split,
        permutations: Vec::new(),
        label_groups: groups,
    })
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// Gaussian class blobs, rotated per task and min-max scaled to `[0, 1]`.
/// The first `samples_per_task` samples of each task form the train/val
/// pool; a further quarter as many form the test set.
pub fn make_synthetic(
    num_tasks: usize,
    samples_per_task: usize,
    input_dim: usize,
    classes: usize,
    seed: u64,
) -> Result<TaskSequence> {
    if num_tasks == 0 || samples_per_task < 2 || input_dim == 0 || classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs positive counts (tasks {num_tasks}, samples {samples_per_task}, dim {input_dim}, classes {classes})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let separation = 4.0;
    let test_count = samples_per_task.div_ceil(4).max(classes);
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 0..num_tasks {
        let means: Vec<Vec<f64>> = (0..classes)
            .map(|_| {
                let v: Vec<f64> = (0..input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.into_iter().map(|x| separation * x / n).collect()
            })
            .collect();
        let rotation = random_rotation(input_dim, &mut rng);
        let total = samples_per_task + test_count;
        let mut raw = Tensor2D::zeros(total, input_dim);
        let mut labels = Vec::with_capacity(total);
        for i in 0..total {
            let label = i % classes;
            let point: Vec<f64> = means[label]
                .iter()
                .map(|m| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + 0.5 * z
                })
                .collect();
            for (o, row) in raw.row_mut(i).iter_mut().zip(&rotation) {
                *o = row.iter().zip(&point).map(|(a, b)| a * b).sum();
            }
            labels.push(label);
        }
        let lo = raw.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        let scaled = raw.map(|v| (v - lo) / span);
        let all = LabeledSet::new(scaled, labels, classes)?;
        let pool = all.subset(&(0..samples_per_task).collect::<Vec<_>>())?;
        let test = all.subset(&(samples_per_task..total).collect::<Vec<_>>())?;
        let (train, val) = pool.split(TRAIN_FRACTION, seed.wrapping_add(1000 + t as u64))?;
        tasks.push(Task { train, val, test });
    }
    Ok(TaskSequence {
        tasks,
        kind: TaskKind::Synthetic,
        permutations: Vec::new(),
        label_groups: Vec::new(),
    })
}

/// Epoch-shuffled minibatches; the final short batch is included.
pub struct BatchIter<'a> {
    set: &'a LabeledSet,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = (Tensor2D, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some((
            self.set.inputs.gather_rows(idx),
            idx.iter().map(|&i| self.set.labels[i]).collect(),
        ))
    }
}

pub fn batch_iter(set: &LabeledSet, batch_size: usize, shuffle_seed: u64) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    Ok(BatchIter {
        set,
        order,
        batch_size,
        pos: 0,
    })
}
