//! Datasets, IDX loading and synthetic task generators.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::net::seeded_rng;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Labelled examples, one row of `inputs` per label.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.shape().len() != 2 || inputs.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "inputs {:?} do not match {} labels",
                inputs.shape(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty selection".into()));
        }
        Self::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.classes,
        )
    }

    /// The same examples repeated twice.
    pub fn duplicated(&self) -> Self {
        let idx: Vec<usize> = (0..self.len()).chain(0..self.len()).collect();
        self.select(&idx).expect("nonempty")
    }
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 * (1 + dims);
    if bytes.len() < need {
        return Err(idx_err(path, format!("file has {} bytes, header needs {need}", bytes.len())));
    }
    let word = |i: usize| u32::from_be_bytes([bytes[4 * i], bytes[4 * i + 1], bytes[4 * i + 2], bytes[4 * i + 3]]);
    if word(0) != magic {
        return Err(idx_err(path, format!("bad magic {:#010x}, expected {magic:#010x}", word(0))));
    }
    let shape: Vec<usize> = (1..=dims).map(|i| word(i) as usize).collect();
    let payload: usize = shape.iter().product();
    if bytes.len() != need + payload {
        return Err(idx_err(
            path,
            format!("payload is {} bytes, header announces {payload}", bytes.len() - need),
        ));
    }
    Ok(shape)
}

/// Reads an IDX image file (`0x00000803`) and label file (`0x00000801`).
/// Pixels are scaled to `[0, 1]` and flattened to one row per image.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images).map_err(|e| idx_err(images, e.to_string()))?;
    let lab = fs::read(labels).map_err(|e| idx_err(labels, e.to_string()))?;
    let ishape = read_header(&img, images, IMAGE_MAGIC, 3)?;
    let lshape = read_header(&lab, labels, LABEL_MAGIC, 1)?;
    if ishape[0] != lshape[0] {
        return Err(idx_err(
            images,
            format!("{} images but {} labels in {}", ishape[0], lshape[0], labels.display()),
        ));
    }
    if ishape[0] == 0 {
        return Err(idx_err(images, "no images"));
    }
    let pixels = ishape[1] * ishape[2];
    let data = img[16..].iter().map(|&p| f64::from(p) / 255.0).collect();
    let ys: Vec<usize> = lab[8..].iter().map(|&l| usize::from(l)).collect();
    let classes = ys.iter().max().map_or(0, |m| m + 1);
    Dataset::new(Tensor::new(vec![ishape[0], pixels], data)?, ys, classes)
}

/// Writes raw `u8` images of `rows × cols` pixels and their labels in IDX
/// format.
pub fn write_idx(images: &Path, labels: &Path, pixels: &[u8], rows: usize, cols: usize, ys: &[u8]) -> Result<()> {
    if rows * cols == 0 || pixels.len() != ys.len() * rows * cols {
        return Err(Error::InvalidArgument(format!(
            "{} pixel bytes for {} images of {rows}x{cols}",
            pixels.len(),
            ys.len()
        )));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    for w in [IMAGE_MAGIC, ys.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&w.to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = Vec::with_capacity(8 + ys.len());
    for w in [LABEL_MAGIC, ys.len() as u32] {
        lab.extend_from_slice(&w.to_be_bytes());
    }
    lab.extend_from_slice(ys);
    fs::write(images, img)?;
    fs::write(labels, lab)?;
    Ok(())
}

/// Standard file names of an MNIST-style directory.
#[derive(Debug, Clone)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

impl IdxPaths {
    pub fn in_dir(root: &Path) -> Self {
        Self {
            train_images: root.join("train-images-idx3-ubyte"),
            train_labels: root.join("train-labels-idx1-ubyte"),
            test_images: root.join("t10k-images-idx3-ubyte"),
            test_labels: root.join("t10k-labels-idx1-ubyte"),
        }
    }

    pub fn exist(&self) -> bool {
        [&self.train_images, &self.train_labels, &self.test_images, &self.test_labels]
            .iter()
            .all(|p| p.is_file())
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            load_idx(&self.train_images, &self.train_labels)?,
            load_idx(&self.test_images, &self.test_labels)?,
        ))
    }
}

/// One task of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: usize,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSequence {
    tasks: Vec<Task>,
}

impl TaskSequence {
    pub fn new(tasks: Vec<Task>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for t in &tasks {
            if !seen.insert(t.id) {
                return Err(Error::InvalidArgument(format!("duplicate task id {}", t.id)));
            }
            for (name, d) in [("train", &t.train), ("val", &t.val), ("test", &t.test)] {
                if d.is_empty() {
                    return Err(Error::InvalidArgument(format!("task {} has an empty {name} split", t.id)));
                }
                if d.classes() > t.classes {
                    return Err(Error::InvalidArgument(format!("task {} {name} split has too many classes", t.id)));
                }
            }
        }
        if tasks.is_empty() {
            return Err(Error::InvalidArgument("empty task sequence".into()));
        }
        Ok(Self { tasks })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// The first `n` tasks.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        Self::new(self.tasks[..n.min(self.tasks.len())].to_vec())
    }
}

fn binary_subset(base: &Dataset, a: usize, b: usize) -> Result<Dataset> {
    let mut idx = Vec::new();
    let mut ys = Vec::new();
    for (i, &l) in base.labels().iter().enumerate() {
        if l == a || l == b {
            idx.push(i);
            ys.push(usize::from(l == b));
        }
    }
    if idx.is_empty() {
        return Err(Error::InvalidArgument(format!("no examples of classes {a} or {b}")));
    }
    Dataset::new(base.inputs().select_rows(&idx), ys, 2)
}

/// Binary tasks over class pairs: label 0 is `class_a`, label 1 is
/// `class_b`. Source order is preserved; the last `val_fraction` of each
/// task's training examples becomes its validation split.
pub fn make_split_tasks(train: &Dataset, test: &Dataset, pairs: &[(usize, usize)], val_fraction: f64) -> Result<TaskSequence> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!("validation fraction {val_fraction} not in [0, 1)")));
    }
    let mut tasks = Vec::with_capacity(pairs.len());
    for (id, &(a, b)) in pairs.iter().enumerate() {
        for c in [a, b] {
            if c >= train.classes() || c >= test.classes() {
                return Err(Error::InvalidArgument(format!("unknown class {c}")));
            }
        }
        let full = binary_subset(train, a, b)?;
        let n_val = ((full.len() as f64) * val_fraction).round() as usize;
        let n_val = n_val.clamp(1, full.len() - 1);
        let cut = full.len() - n_val;
        let tr: Vec<usize> = (0..cut).collect();
        let va: Vec<usize> = (cut..full.len()).collect();
        tasks.push(Task {
            id,
            train: full.select(&tr)?,
            val: full.select(&va)?,
            test: binary_subset(test, a, b)?,
            classes: 2,
        });
    }
    TaskSequence::new(tasks)
}

/// The five digit pairs of the standard split benchmark.
pub const SPLIT_PAIRS: [(usize, usize); 5] = [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)];

/// Cluster centres per task as `[(class 0 centre), (class 1 centre)]`.
pub const TOY_CENTRES: [[(f64, f64); 2]; 2] = [[(-2.0, 0.0), (2.0, 0.0)], [(0.0, -2.0), (0.0, 2.0)]];

fn cluster_split(rng: &mut rand_chacha::ChaCha8Rng, centres: &[(f64, f64); 2], n: usize, spread: f64) -> Result<Dataset> {
    let mut data = Vec::with_capacity(4 * n);
    let mut ys = Vec::with_capacity(2 * n);
    for (label, &(cx, cy)) in centres.iter().enumerate() {
        for _ in 0..n {
            data.push(cx + spread * rng.sample::<f64, _>(StandardNormal));
            data.push(cy + spread * rng.sample::<f64, _>(StandardNormal));
            ys.push(label);
        }
    }
    Dataset::new(Tensor::new(vec![2 * n, 2], data)?, ys, 2)
}

/// Two binary tasks on isotropic 2-D clusters: task 0 separates the
/// horizontal pair of centres, task 1 the vertical pair.
pub fn gen_toy_clusters(seed: u64, n_per_class: usize, spread: f64) -> Result<TaskSequence> {
    if n_per_class < 10 {
        return Err(Error::InvalidArgument("need at least 10 points per class".into()));
    }
    if !(spread > 0.0) {
        return Err(Error::InvalidArgument(format!("spread {spread} must be positive")));
    }
    let mut tasks = Vec::new();
    for (id, centres) in TOY_CENTRES.iter().enumerate() {
        let mut rng = seeded_rng(seed, 100 + id as u64);
        tasks.push(Task {
            id,
            train: cluster_split(&mut rng, centres, n_per_class, spread)?,
            val: cluster_split(&mut rng, centres, n_per_class, spread)?,
            test: cluster_split(&mut rng, centres, n_per_class, spread)?,
            classes: 2,
        });
    }
    TaskSequence::new(tasks)
}

/// 1000 standard-normal observations for the one-parameter curvature model.
pub fn gen_curvature_toy(seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed, 200);
    (0..1000).map(|_| rng.sample(StandardNormal)).collect()
}

/// Synthetic binary tasks in `features` dimensions. Each task labels points
/// by the sign of a random linear score passed through a fixed random
/// nonlinear feature map, so tasks share structure without coinciding.
pub fn gen_synthetic_tasks(seed: u64, tasks: usize, features: usize, n_train: usize, n_test: usize) -> Result<TaskSequence> {
    if tasks == 0 || features == 0 || n_train < 2 || n_test < 2 {
        return Err(Error::InvalidArgument("synthetic tasks need positive sizes".into()));
    }
    let mut shared = seeded_rng(seed, 300);
    let hidden = 2 * features;
    let proj: Vec<f64> = (0..features * hidden).map(|_| shared.sample::<f64, _>(StandardNormal)).collect();
    let mut out = Vec::with_capacity(tasks);
    for id in 0..tasks {
        let mut rng = seeded_rng(seed, 301 + id as u64);
        let dir: Vec<f64> = (0..hidden).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut split = |n: usize| -> Result<Dataset> {
            let mut xs = Vec::with_capacity(n * features);
            let mut ys = Vec::with_capacity(n);
            for _ in 0..n {
                let x: Vec<f64> = (0..features).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let score: f64 = (0..hidden)
                    .map(|h| {
                        let a: f64 = (0..features).map(|f| x[f] * proj[f * hidden + h]).sum::<f64>() / (features as f64).sqrt();
                        dir[h] * a.tanh()
                    })
                    .sum();
                ys.push(usize::from(score > 0.0));
                xs.extend(x);
            }
            Dataset::new(Tensor::new(vec![n, features], xs)?, ys, 2)
        };
        let train = split(n_train)?;
        let val = split(n_test)?;
        let test = split(n_test)?;
        out.push(Task {
            id,
            train,
            val,
            test,
            classes: 2,
        });
    }
    TaskSequence::new(out)
}

/// Minibatch index lists covering `0..n` once in a seeded random order.
pub fn shuffled_batches(n: usize, batch: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
        let (i, l) = (dir.join("img"), dir.join("lab"));
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|k| (k % 256) as u8).collect();
        write_idx(&i, &l, &pixels, 28, 28, &[3, 7]).unwrap();
        (i, l)
    }

    #[test]
    fn loads_written_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(dir.path());
        let d = load_idx(&i, &l).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.features(), 28 * 28);
        assert_eq!(d.labels(), &[3, 7]);
        assert_eq!(d.inputs().data()[255], 1.0);
    }

    #[test]
    fn fixture_bytes_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(dir.path());
        let d = load_idx(&i, &l).unwrap();
        let pixels: Vec<u8> = d.inputs().data().iter().map(|p| (p * 255.0).round() as u8).collect();
        let ys: Vec<u8> = d.labels().iter().map(|&y| y as u8).collect();
        let (i2, l2) = (dir.path().join("img2"), dir.path().join("lab2"));
        write_idx(&i2, &l2, &pixels, 28, 28, &ys).unwrap();
        assert_eq!(fs::read(&i).unwrap(), fs::read(&i2).unwrap());
        assert_eq!(fs::read(&l).unwrap(), fs::read(&l2).unwrap());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let (i, l) = fixture(dir.path());
        let mut bytes = fs::read(&i).unwrap();
        bytes[3] = 0x01;
        let bad = dir.path().join("bad");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load_idx(&bad, &l), Err(Error::Idx { .. })));
        let bytes = fs::read(&i).unwrap();
        fs::write(&bad, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(load_idx(&bad, &l), Err(Error::Idx { .. })));
        assert!(matches!(load_idx(&i, &i), Err(Error::Idx { .. })));
    }

    #[test]
    fn split_tasks_partition_the_source() {
        let xs = Tensor::new(vec![20, 1], (0..20).map(f64::from).collect()).unwrap();
        let ys: Vec<usize> = (0..20).map(|i| i % 4).collect();
        let base = Dataset::new(xs, ys, 4).unwrap();
        let seq = make_split_tasks(&base, &base, &[(0, 1), (2, 3)], 0.2).unwrap();
        let total: usize = seq.tasks().iter().map(|t| t.train.len() + t.val.len()).sum();
        assert_eq!(total, 20);
        let t0 = &seq.tasks()[0];
        assert!(t0.train.inputs().data().iter().zip(t0.train.labels()).all(|(&x, &y)| (x as usize % 4) == y));
        assert!(make_split_tasks(&base, &base, &[(0, 9)], 0.1).is_err());
    }

    #[test]
    fn clusters_are_balanced_and_seeded() {
        let a = gen_toy_clusters(3, 12, 0.4).unwrap();
        let b = gen_toy_clusters(3, 12, 0.4).unwrap();
        assert_eq!(a, b);
        let ones = a.tasks()[0].train.labels().iter().filter(|&&y| y == 1).count();
        assert_eq!(ones, 12);
    }

    #[test]
    fn curvature_data_is_standard_normal() {
        let x = gen_curvature_toy(1);
        let m = x.iter().sum::<f64>() / 1000.0;
        let s = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 999.0).sqrt();
        assert!(m.abs() < 0.1 && (s - 1.0).abs() < 0.1);
        assert_eq!(x, gen_curvature_toy(1));
    }
}
