//! Datasets: MNIST from IDX files, Gaussian blobs, class-balanced sampling.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::train::TrainingData;
use crate::nn::Batch;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const MNIST_SIDE: usize = 28;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("{file}: wrong magic 0x{found:08x} at byte 0 (expected 0x{expected:08x})")]
    WrongMagic { file: String, expected: u32, found: u32 },
    #[error("{file}: truncated at byte {offset}: need {expected} bytes, {actual} available")]
    Truncated { file: String, offset: usize, expected: usize, actual: usize },
    #[error("{file}: unexpected image shape {rows}x{cols} at byte 8 (expected 28x28)")]
    Shape { file: String, rows: usize, cols: usize },
    #[error("{images} images but {labels} labels (item counts at byte 4 differ)")]
    CountMismatch { images: usize, labels: usize },
    #[error("{file}: label {label} at byte {offset} is not a digit")]
    BadLabel { file: String, offset: usize, label: u8 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    features: Array2<f32>,
    labels: Vec<u32>,
    classes: usize,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, features: Array2<f32>, labels: Vec<u32>, classes: usize) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::Data("dataset has no examples".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Data(format!("{} rows but {} labels", features.nrows(), labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= classes) {
            return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { name: name.into(), features, labels, classes })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }

    pub fn rows(&self, rows: &[usize]) -> Batch {
        let features = self.features.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::classes(features, labels).expect("row selection keeps shapes aligned")
    }

    /// The whole dataset as a single batch.
    pub fn as_batch(&self) -> Batch {
        Batch::classes(self.features.clone(), self.labels.clone()).expect("aligned")
    }

    pub fn head(&self, n: usize) -> Result<Self> {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.rows(&rows);
        let labels = match b.targets {
            crate::nn::Targets::Classes(l) => l,
            crate::nn::Targets::Values(_) => unreachable!("classification batch"),
        };
        Self::new(format!("{}[..{}]", self.name, rows.len()), b.features, labels, self.classes)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }
}

impl TrainingData for LabeledDataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, rows: &[usize]) -> Batch {
        self.rows(rows)
    }
}

struct Reader<'a> {
    file: &'a str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], IdxError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(IdxError::Truncated { file: self.file.into(), offset: self.pos, expected: n, actual: available });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> std::result::Result<u32, IdxError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn magic(&mut self, expected: u32) -> std::result::Result<(), IdxError> {
        let found = self.u32_be()?;
        if found != expected {
            return Err(IdxError::WrongMagic { file: self.file.into(), expected, found });
        }
        Ok(())
    }
}

/// Parses an IDX image file into `(count, rows · cols)` pixels scaled to `[0, 1]`.
pub fn parse_idx_images(file: &str, bytes: &[u8]) -> std::result::Result<Array2<f32>, IdxError> {
    let mut r = Reader { file, bytes, pos: 0 };
    r.magic(IDX_IMAGES_MAGIC)?;
    let count = r.u32_be()? as usize;
    let rows = r.u32_be()? as usize;
    let cols = r.u32_be()? as usize;
    if rows != MNIST_SIDE || cols != MNIST_SIDE {
        return Err(IdxError::Shape { file: file.into(), rows, cols });
    }
    let pixels = r.take(count * rows * cols)?;
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    Ok(Array2::from_shape_vec((count, rows * cols), data).expect("length matches"))
}

pub fn parse_idx_labels(file: &str, bytes: &[u8]) -> std::result::Result<Vec<u32>, IdxError> {
    let mut r = Reader { file, bytes, pos: 0 };
    r.magic(IDX_LABELS_MAGIC)?;
    let count = r.u32_be()? as usize;
    let start = r.pos;
    let raw = r.take(count)?;
    raw.iter()
        .enumerate()
        .map(|(i, &y)| {
            if y < 10 {
                Ok(y as u32)
            } else {
                Err(IdxError::BadLabel { file: file.into(), offset: start + i, label: y })
            }
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_mnist(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let image_name = images.display().to_string();
    let label_name = labels.display().to_string();
    let features = parse_idx_images(&image_name, &read(images)?)?;
    let labels = parse_idx_labels(&label_name, &read(labels)?)?;
    if features.nrows() != labels.len() {
        return Err(IdxError::CountMismatch { images: features.nrows(), labels: labels.len() }.into());
    }
    let name = images.file_name().map_or_else(|| image_name.clone(), |n| n.to_string_lossy().into_owned());
    LabeledDataset::new(format!("mnist:{name}"), features, labels, 10)
}

/// Pixel mean and standard deviation of the MNIST training images on the `[0, 1]` scale.
pub const MNIST_MEAN: f32 = 0.1307;
pub const MNIST_STD: f32 = 0.3081;

/// Every feature mapped to `(x - mean) / std`.
pub fn standardize(dataset: &LabeledDataset, mean: f32, std: f32) -> Result<LabeledDataset> {
    if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
        return Err(Error::Config(format!("cannot standardize with mean {mean}, std {std}")));
    }
    let features = dataset.features().mapv(|v| (v - mean) / std);
    LabeledDataset::new(dataset.name(), features, dataset.labels().to_vec(), dataset.classes())
}

/// Loads `train-*` and `t10k-*` IDX files from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let train = load_mnist(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))?;
    let test = load_mnist(&dir.join("t10k-images-idx3-ubyte"), &dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Encodes `[0, 1]` pixel rows back into an IDX image file (28 × 28 only).
pub fn encode_idx_images(images: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len());
    out.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend((images.nrows() as u32).to_be_bytes());
    out.extend((MNIST_SIDE as u32).to_be_bytes());
    out.extend((MNIST_SIDE as u32).to_be_bytes());
    out.extend(images.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
    out
}

pub fn encode_idx_labels(labels: &[u32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(IDX_LABELS_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&y| y as u8));
    out
}

/// Gaussian clusters (unit variance) around centers that sit at least
/// `separation` standard deviations apart, min-max scaled into `[0, 1]` with
/// one affine map for all coordinates.
pub fn synth_blobs(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    if classes == 0 || per_class == 0 || dim == 0 {
        return Err(Error::Config("blobs need positive classes, per_class and dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut radius = separation.max(1.0);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut failures = 0;
    while centers.len() < classes {
        let spread = Normal::new(0.0, radius).expect("finite radius");
        let c: Vec<f64> = (0..dim).map(|_| spread.sample(&mut rng)).collect();
        let far_enough = centers
            .iter()
            .all(|o| o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation);
        if far_enough {
            centers.push(c);
        } else {
            failures += 1;
            if failures % 100 == 0 {
                radius *= 1.25;
            }
        }
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let n = classes * per_class;
    let mut raw = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, c) in centers.iter().enumerate() {
        for _ in 0..per_class {
            raw.extend(c.iter().map(|&m| m + unit.sample(&mut rng)));
            labels.push(class as u32);
        }
    }
    let (lo, hi) = raw.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut features = Array2::zeros((n, dim));
    let mut shuffled = Vec::with_capacity(n);
    for (row, &src) in order.iter().enumerate() {
        for j in 0..dim {
            features[[row, j]] = ((raw[src * dim + j] - lo) / span) as f32;
        }
        shuffled.push(labels[src]);
    }
    LabeledDataset::new(format!("blobs:{classes}x{per_class}x{dim}@{separation}#{seed}"), features, shuffled, classes)
}

/// A batch whose per-class counts differ by at most one; classes with a lower
/// index receive the remainder.
pub fn balanced_batch(dataset: &LabeledDataset, size: usize, seed: u64) -> Result<Batch> {
    let classes = dataset.classes();
    if size < classes {
        return Err(Error::Config(format!("balanced batch of {size} cannot cover {classes} classes")));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in dataset.labels().iter().enumerate() {
        members[y as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(size);
    for (class, pool) in members.iter().enumerate() {
        let want = size / classes + usize::from(class < size % classes);
        if pool.is_empty() {
            return Err(Error::Data(format!("class {class} is absent from {}", dataset.name())));
        }
        if pool.len() < want {
            return Err(Error::Data(format!(
                "class {class} has {} examples, balanced batch needs {want}",
                pool.len()
            )));
        }
        rows.extend(pool.choose_multiple(&mut rng, want).copied());
    }
    Ok(dataset.rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Targets;

    fn toy_images(n: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, 784), |(i, j)| ((i * 31 + j * 7) % 256) as f32 / 255.0)
    }

    fn class_counts(batch: &Batch, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        if let Targets::Classes(l) = &batch.targets {
            for &y in l {
                counts[y as usize] += 1;
            }
        }
        counts
    }

    #[test]
    fn idx_round_trip_and_scaling() {
        let images = toy_images(3);
        let bytes = encode_idx_images(&images);
        let parsed = parse_idx_images("img", &bytes).unwrap();
        assert_eq!(parsed, images);
        let mut white = encode_idx_images(&Array2::zeros((1, 784)));
        white[16] = 255;
        assert_eq!(parse_idx_images("img", &white).unwrap()[[0, 0]], 1.0);
        assert_eq!(parse_idx_labels("lbl", &encode_idx_labels(&[3, 0, 9])).unwrap(), vec![3, 0, 9]);
    }

    #[test]
    fn labels_with_image_magic_are_rejected() {
        let mut bytes = encode_idx_labels(&[1, 2]);
        bytes[..4].copy_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        let err = parse_idx_labels("lbl", &bytes).unwrap_err();
        assert!(matches!(err, IdxError::WrongMagic { found: 0x803, .. }));
        assert!(err.to_string().contains("wrong magic"));
    }

    #[test]
    fn truncation_names_the_offset() {
        let bytes = encode_idx_images(&toy_images(2));
        let err = parse_idx_images("img", &bytes[..bytes.len() - 10]).unwrap_err();
        assert_eq!(err, IdxError::Truncated { file: "img".into(), offset: 16, expected: 1568, actual: 1558 });
        let err = parse_idx_labels("lbl", &[0, 0, 8]).unwrap_err();
        assert!(matches!(err, IdxError::Truncated { offset: 0, expected: 4, actual: 3, .. }));
    }

    #[test]
    fn count_mismatch_between_files() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lbl) = (dir.path().join("i"), dir.path().join("l"));
        std::fs::write(&img, encode_idx_images(&toy_images(3))).unwrap();
        std::fs::write(&lbl, encode_idx_labels(&[1, 2])).unwrap();
        match load_mnist(&img, &lbl) {
            Err(Error::Idx(IdxError::CountMismatch { images: 3, labels: 2 })) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn blobs_are_deterministic_and_scaled() {
        let a = synth_blobs(3, 20, 5, 6.0, 1).unwrap();
        let b = synth_blobs(3, 20, 5, 6.0, 1).unwrap();
        let c = synth_blobs(3, 20, 5, 6.0, 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.features(), c.features());
        assert_eq!(a.len(), 60);
        assert!(a.features().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.class_counts(), vec![20, 20, 20]);
        assert!(synth_blobs(3, 0, 5, 6.0, 1).is_err());
    }

    #[test]
    fn balanced_batches() {
        let data = synth_blobs(10, 80, 4, 4.0, 3).unwrap();
        let batch = balanced_batch(&data, 512, 1).unwrap();
        assert_eq!(batch.len(), 512);
        assert!(class_counts(&batch, 10).iter().all(|&c| c == 51 || c == 52));
        let one_each = balanced_batch(&data, 10, 1).unwrap();
        assert_eq!(class_counts(&one_each, 10), vec![1; 10]);
        let other = balanced_batch(&data, 512, 2).unwrap();
        assert_ne!(other.features, batch.features);
        assert_eq!(class_counts(&other, 10), class_counts(&batch, 10));
        assert!(balanced_batch(&data, 5, 1).is_err());
    }

    #[test]
    fn missing_class_is_an_error() {
        let features = Array2::zeros((4, 2));
        let data = LabeledDataset::new("gap", features, vec![0, 0, 2, 2], 3).unwrap();
        assert!(matches!(balanced_batch(&data, 3, 0), Err(Error::Data(_))));
    }
}
