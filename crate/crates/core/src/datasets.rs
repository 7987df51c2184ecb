//! Task streams: seeded gaussian class clusters and a small tensor file format.

use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::container::{to_u32, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::TaskId;

pub const TENSOR_MAGIC: [u8; 4] = *b"DGDS";
pub const TENSOR_VERSION: u32 = 1;

/// Test examples get ids in a separate range from training examples.
pub const TEST_ID_BASE: u64 = 1 << 63;

/// Examples with labels and stream identities.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub ids: Vec<u64>,
}

impl LabeledSet {
    pub fn new(x: Matrix, y: Vec<usize>, ids: Vec<u64>) -> Result<Self> {
        if y.len() != x.rows() || ids.len() != x.rows() {
            return Err(Error::shape("labeled set", x.shape(), (y.len(), ids.len())));
        }
        Ok(Self { x, y, ids })
    }

    pub fn empty(d: usize) -> Self {
        Self { x: Matrix::zeros(0, d), y: Vec::new(), ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            x: self.x.select_rows(indices),
            y: indices.iter().map(|&i| self.y[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
        }
    }

    /// Consecutive chunks of at most `size` examples.
    pub fn batches(&self, size: usize) -> impl Iterator<Item = LabeledSet> + '_ {
        let size = size.max(1);
        (0..self.len()).step_by(size).map(move |start| {
            let end = (start + size).min(self.len());
            self.select(&(start..end).collect::<Vec<_>>())
        })
    }
}

/// One task: its global class range and its train and test examples.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub task: TaskId,
    pub classes: Range<usize>,
    pub train: LabeledSet,
    pub test: LabeledSet,
}

/// Synthetic stream parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub d_in: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Radius of the sphere the class means are drawn on.
    pub separation: f64,
    /// Per-coordinate standard deviation around each mean.
    pub noise: f64,
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            tasks: 5,
            classes_per_task: 2,
            d_in: 16,
            train_per_class: 200,
            test_per_class: 200,
            separation: 4.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.classes_per_task == 0 || self.d_in == 0 {
            return Err(Error::InvalidArgument("tasks, classes per task and d_in must be positive".into()));
        }
        if self.separation.is_nan() || self.noise.is_nan() || self.separation <= 0.0 || self.noise <= 0.0 {
            return Err(Error::InvalidArgument("separation and noise must be positive".into()));
        }
        let classes = self
            .tasks
            .checked_mul(self.classes_per_task)
            .filter(|&c| c <= u32::MAX as usize)
            .ok_or_else(|| Error::InvalidArgument("class count exceeds the label range".into()))?;
        if self.tasks > TaskId::MAX as usize || classes == 0 {
            return Err(Error::InvalidArgument("too many tasks".into()));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.tasks * self.classes_per_task
    }
}

/// Class means drawn uniformly on the radius-`separation` sphere.
pub fn class_means(spec: &StreamSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..spec.class_count())
        .map(|_| loop {
            let v: Vec<f64> = (0..spec.d_in).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|a| a * spec.separation / norm).collect();
            }
        })
        .collect()
}

fn sample_class(mean: &[f64], noise: f64, n: usize, rng: &mut impl Rng, out: &mut Vec<f64>) {
    for _ in 0..n {
        out.extend(mean.iter().map(|m| m + noise * rng.sample::<f64, _>(StandardNormal)));
    }
}

/// Generates a seeded stream of disjoint-class tasks.
pub fn synth_stream(spec: &StreamSpec) -> Result<Vec<TaskData>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = class_means(spec, &mut rng);
    let d = spec.d_in;
    let mut tasks = Vec::with_capacity(spec.tasks);
    let mut next_train_id = 0u64;
    let mut next_test_id = TEST_ID_BASE;
    for t in 0..spec.tasks {
        let classes = t * spec.classes_per_task..(t + 1) * spec.classes_per_task;
        let (mut train_x, mut train_y) = (Vec::new(), Vec::new());
        let (mut test_x, mut test_y) = (Vec::new(), Vec::new());
        for c in classes.clone() {
            sample_class(&means[c], spec.noise, spec.train_per_class, &mut rng, &mut train_x);
            train_y.extend(std::iter::repeat_n(c, spec.train_per_class));
            sample_class(&means[c], spec.noise, spec.test_per_class, &mut rng, &mut test_x);
            test_y.extend(std::iter::repeat_n(c, spec.test_per_class));
        }
        let n_train = train_y.len();
        let n_test = test_y.len();
        let train_ids = (next_train_id..next_train_id + n_train as u64).collect();
        let test_ids = (next_test_id..next_test_id + n_test as u64).collect();
        next_train_id += n_train as u64;
        next_test_id += n_test as u64;
        let train = LabeledSet::new(Matrix::new(n_train, d, train_x)?, train_y, train_ids)?;
        let test = LabeledSet::new(Matrix::new(n_test, d, test_x)?, test_y, test_ids)?;

        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        tasks.push(TaskData { task: t as TaskId + 1, classes, train: train.select(&order), test });
    }
    Ok(tasks)
}

/// Splits labeled examples into consecutive class blocks, shuffling each
/// block's order with `seed`.
pub fn split_by_class(
    set: &LabeledSet,
    class_count: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<Vec<(Range<usize>, LabeledSet)>> {
    if classes_per_task == 0 || !class_count.is_multiple_of(classes_per_task) {
        return Err(Error::NotDivisible { classes: class_count, per_task: classes_per_task });
    }
    if let Some(&label) = set.y.iter().find(|&&y| y >= class_count) {
        return Err(Error::LabelOutOfRange { label, classes: class_count });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for t in 0..class_count / classes_per_task {
        let classes = t * classes_per_task..(t + 1) * classes_per_task;
        let mut idx: Vec<usize> = (0..set.len()).filter(|&i| classes.contains(&set.y[i])).collect();
        idx.shuffle(&mut rng);
        out.push((classes, set.select(&idx)));
    }
    Ok(out)
}

/// Builds tasks from separate train and test sets.
pub fn tasks_from_sets(
    train: &LabeledSet,
    test: &LabeledSet,
    class_count: usize,
    classes_per_task: usize,
    seed: u64,
) -> Result<Vec<TaskData>> {
    let train_parts = split_by_class(train, class_count, classes_per_task, seed)?;
    let test_parts = split_by_class(test, class_count, classes_per_task, seed ^ 0x5eed)?;
    Ok(train_parts
        .into_iter()
        .zip(test_parts)
        .enumerate()
        .map(|(t, ((classes, train), (_, test)))| TaskData { task: t as TaskId + 1, classes, train, test })
        .collect())
}

/// Contents of a tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub class_count: usize,
}

impl TensorFile {
    /// Assigns sequential ids starting at `first_id`.
    pub fn into_set(self, first_id: u64) -> LabeledSet {
        let n = self.y.len() as u64;
        LabeledSet { x: self.x, y: self.y, ids: (first_id..first_id + n).collect() }
    }
}

pub fn encode_tensor(x: &Matrix, y: &[usize], class_count: usize) -> Result<Vec<u8>> {
    if y.len() != x.rows() {
        return Err(Error::shape("tensor file", x.shape(), (y.len(), 1)));
    }
    if let Some(&label) = y.iter().find(|&&l| l >= class_count) {
        return Err(Error::LabelOutOfRange { label, classes: class_count });
    }
    let mut w = ByteWriter::new();
    w.bytes(&TENSOR_MAGIC)
        .u32(TENSOR_VERSION)
        .u32(to_u32(x.rows(), "row count")?)
        .u32(to_u32(x.cols(), "column count")?)
        .u32(to_u32(class_count, "class count")?)
        .f64s(x.data());
    for &label in y {
        w.u32(to_u32(label, "label")?);
    }
    Ok(w.finish())
}

pub fn decode_tensor(bytes: &[u8]) -> Result<TensorFile> {
    let mut r = ByteReader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    r.version(TENSOR_VERSION)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let class_count = r.u32()? as usize;
    let count = n.checked_mul(d).ok_or_else(|| Error::Malformed(format!("{n}x{d} overflows")))?;
    let x = Matrix::new(n, d, r.f64s(count)?)?;
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.u32()? as usize;
        if label >= class_count {
            return Err(Error::LabelOutOfRange { label, classes: class_count });
        }
        y.push(label);
    }
    r.finish()?;
    Ok(TensorFile { x, y, class_count })
}

pub fn save_tensor_file(path: impl AsRef<Path>, x: &Matrix, y: &[usize], class_count: usize) -> Result<()> {
    std::fs::write(path, encode_tensor(x, y, class_count)?)?;
    Ok(())
}

pub fn load_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    decode_tensor(&std::fs::read(path)?)
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn small_spec() -> StreamSpec {
        StreamSpec {
            tasks: 3,
            classes_per_task: 2,
            d_in: 4,
            train_per_class: 10,
            test_per_class: 5,
            ..Default::default()
        }
    }

    #[test]
    fn stream_is_deterministic_and_partitioned() {
        let a = synth_stream(&small_spec()).unwrap();
        let b = synth_stream(&small_spec()).unwrap();
        assert_eq!(a, b);
        let other = synth_stream(&StreamSpec { seed: 9, ..small_spec() }).unwrap();
        assert_ne!(a[0].train.x, other[0].train.x);

        let mut seen = Vec::new();
        for (t, task) in a.iter().enumerate() {
            assert_eq!(task.task, t as u32 + 1);
            assert_eq!(task.train.len(), 20);
            assert_eq!(task.test.len(), 10);
            assert!(task.train.y.iter().chain(&task.test.y).all(|y| task.classes.contains(y)));
            seen.extend(task.classes.clone());
            for id in &task.train.ids {
                assert!(!task.test.ids.contains(id));
            }
        }
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn empirical_means_are_close() {
        let spec = StreamSpec { tasks: 1, classes_per_task: 3, d_in: 5, train_per_class: 400, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let means = class_means(&spec, &mut rng);
        for m in &means {
            let r = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - spec.separation).abs() < 1e-12);
        }
        let tasks = synth_stream(&spec).unwrap();
        let train = &tasks[0].train;
        for (c, mean) in means.iter().enumerate() {
            let rows: Vec<usize> = (0..train.len()).filter(|&i| train.y[i] == c).collect();
            for k in 0..spec.d_in {
                let avg = rows.iter().map(|&i| train.x.get(i, k)).sum::<f64>() / rows.len() as f64;
                assert!((avg - mean[k]).abs() < 3.0 * spec.noise / (rows.len() as f64).sqrt());
            }
        }
    }

    #[test]
    fn spec_validation() {
        assert!(synth_stream(&StreamSpec { noise: 0.0, ..small_spec() }).is_err());
        assert!(synth_stream(&StreamSpec { tasks: 0, ..small_spec() }).is_err());
        assert!(synth_stream(&StreamSpec { tasks: 1 << 20, classes_per_task: 1 << 20, ..small_spec() }).is_err());
    }

    #[test]
    fn split_blocks() {
        let y: Vec<usize> = (0..40).map(|i| i % 10).collect();
        let x = Matrix::new(40, 1, (0..40).map(|i| i as f64).collect()).unwrap();
        let set = LabeledSet::new(x, y, (0..40).collect()).unwrap();
        let parts = split_by_class(&set, 10, 5, 3).unwrap();
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].0, 0..5);
        assert_eq!(parts[1].0, 5..10);
        let mut all: Vec<u64> = parts.iter().flat_map(|(_, s)| s.ids.clone()).collect();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert!(parts[1].1.y.iter().all(|y| (5..10).contains(y)));
        assert!(matches!(split_by_class(&set, 10, 3, 0), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn batching_arithmetic() {
        let set = LabeledSet::new(Matrix::zeros(35, 2), vec![0; 35], (0..35).collect()).unwrap();
        let sizes: Vec<usize> = set.batches(10).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![10, 10, 10, 5]);
    }

    #[test]
    fn tensor_round_trip_and_corruption() {
        let x = Matrix::from_rows(&[[1.5, -2.0, 0.0], [3.25, 1e-300, -7.0]]).unwrap();
        let bytes = encode_tensor(&x, &[0, 2], 3).unwrap();
        assert_eq!(bytes.len(), 4 + 16 + 48 + 8);
        let back = decode_tensor(&bytes).unwrap();
        assert_eq!(
            back.x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.y, vec![0, 2]);

        let empty = decode_tensor(&encode_tensor(&Matrix::zeros(0, 3), &[], 1).unwrap()).unwrap();
        assert_eq!(empty.x.shape(), (0, 3));
        assert!(empty.y.is_empty());

        assert!(matches!(decode_tensor(&bytes[..bytes.len() - 5]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"NOPE");
        assert!(matches!(decode_tensor(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode_tensor(&bad), Err(Error::VersionMismatch { found: 2, .. })));
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 4..].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_tensor(&bad), Err(Error::LabelOutOfRange { label: 7, classes: 3 })));
    }
}
