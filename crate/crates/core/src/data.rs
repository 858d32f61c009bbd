//! Datasets: MNIST IDX files, synthetic Gaussian blobs, and shuffled
//! minibatches.

use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, IdxError, Result};
use crate::nn::one_hot;
use crate::tensor::Tensor;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Canonical MNIST file stems, in the order train images, train labels,
/// test images, test labels.
pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// A labelled sample matrix. `x` has shape `[n, features...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rank() < 2 || x.rows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for samples of shape {:?}",
                labels.len(),
                x.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= {classes} classes")));
        }
        Ok(Self { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let row = self.x.row_len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(self.x.row(i));
        }
        let mut shape = self.x.shape().to_vec();
        shape[0] = indices.len();
        Tensor::from_parts(shape, data)
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        Dataset {
            x: self.select(&idx),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| {
            IdxError::Truncated {
                path: path.to_path_buf(),
                expected: at + 4,
                found: bytes.len(),
            }
            .into()
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        }
        .into());
    }
    Ok(())
}

fn check_payload(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() != expected {
        return Err(IdxError::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        }
        .into());
    }
    Ok(())
}

/// Loads an IDX image/label pair (optionally gzipped). Pixels are scaled to
/// `[0, 1]`; images come out flattened to `[n, rows * cols]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images)?;
    check_magic(&img, IMAGE_MAGIC, images)?;
    let count = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    check_payload(&img, 16 + count * rows * cols, images)?;

    let lab = read_maybe_gz(labels)?;
    check_magic(&lab, LABEL_MAGIC, labels)?;
    let label_count = be_u32(&lab, 4, labels)? as usize;
    check_payload(&lab, 8 + label_count, labels)?;
    if label_count != count {
        return Err(IdxError::CountMismatch {
            images: images.to_path_buf(),
            labels: labels.to_path_buf(),
            image_count: count,
            label_count,
        }
        .into());
    }
    let mut ys = Vec::with_capacity(count);
    for &l in &lab[8..] {
        if l > 9 {
            return Err(IdxError::BadLabel {
                path: labels.to_path_buf(),
                label: l,
            }
            .into());
        }
        ys.push(l as usize);
    }
    if count == 0 || rows * cols == 0 {
        return Err(Error::InvalidArgument(format!("{} holds no pixels", images.display())));
    }
    let xs = img[16..].iter().map(|&p| p as f64 / 255.0).collect();
    Dataset::new(Tensor::from_parts(vec![count, rows * cols], xs), ys, 10)
}

/// Finds `stem` or `stem.gz` inside `dir`.
pub fn locate(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "MNIST file not found (plain or .gz)"),
    ))
}

/// Loads the MNIST train and test splits from `dir`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    let p: Vec<PathBuf> = MNIST_FILES
        .iter()
        .map(|s| locate(dir, s))
        .collect::<Result<_>>()?;
    Ok((load_idx(&p[0], &p[1])?, load_idx(&p[2], &p[3])?))
}

/// Gaussian blobs with unit noise around `classes` centers drawn so that
/// every pair of centers is at least six standard deviations apart.
pub fn synthetic_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || classes < 2 || dim == 0 {
        return Err(Error::InvalidArgument(format!(
            "blobs need n > 0, classes >= 2, dim > 0; got {n}, {classes}, {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = 6.0 * classes as f64;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centers.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::InvalidArgument(format!(
                "cannot place {classes} separated centers in {dim} dimensions"
            )));
        }
        let c: Vec<f64> = (0..dim).map(|_| rng.random_range(-side..side)).collect();
        let far = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() >= 36.0
        });
        if far {
            centers.push(c);
        }
    }
    let mut xs = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        for &c in &centers[k] {
            let z: f64 = StandardNormal.sample(&mut rng);
            xs.push(c + z);
        }
        labels.push(k);
    }
    Dataset::new(Tensor::from_parts(vec![n, dim], xs), labels, classes)
}

/// One minibatch: inputs, one-hot targets and the raw labels.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Tensor,
    pub targets: Tensor,
    pub labels: Vec<usize>,
}

/// The sample order for one epoch, a deterministic function of
/// `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled minibatches covering every sample exactly once; the last batch
/// may be short.
pub fn batches(ds: &Dataset, size: usize, seed: u64, epoch: usize) -> Result<impl Iterator<Item = Batch> + '_> {
    if size == 0 {
        return Err(Error::InvalidArgument("batch size must be > 0".into()));
    }
    let order = epoch_order(ds.len(), seed, epoch);
    Ok((0..ds.len().div_ceil(size)).map(move |b| {
        let idx = &order[b * size..((b + 1) * size).min(order.len())];
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        Batch {
            x: ds.select(idx),
            targets: one_hot(&labels, ds.classes),
            labels,
        }
    }))
}

/// Contiguous, unshuffled chunks for evaluation.
pub fn chunks(ds: &Dataset, size: usize) -> impl Iterator<Item = Batch> + '_ {
    let size = size.max(1);
    (0..ds.len().div_ceil(size)).map(move |b| {
        let idx: Vec<usize> = (b * size..((b + 1) * size).min(ds.len())).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
        Batch {
            x: ds.select(&idx),
            targets: one_hot(&labels, ds.classes),
            labels,
        }
    })
}
