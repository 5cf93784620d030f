//! Datasets: MNIST IDX files and a seeded synthetic fallback.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{squared_distance, Matrix};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled samples with features in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    n_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::domain(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::domain(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if features.as_slice().iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::domain("features must lie in [0, 1]"));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// Features and labels of the given samples, in order.
    pub fn batch(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (features, labels) = self.batch(indices);
        Dataset {
            features,
            labels,
            n_classes: self.n_classes,
            split: self.split,
        }
    }

    /// The first `n` samples (or all of them if there are fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

/// Reads an IDX image file (magic `0x00000803`, dims `n × rows × cols`) and
/// its IDX label file (magic `0x00000801`). Pixels are scaled by `1/255`
/// and each image is flattened row-major.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_idx(&images, &labels, images_path, labels_path)
}

/// Loads the standard four MNIST files from `dir` as (train, test).
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    let mut test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    test.split = Split::Test;
    Ok((train, test))
}

pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let header = |bytes: &[u8], path: &Path, words: usize| -> Result<Vec<u32>> {
        if bytes.len() < 4 * words {
            return Err(Error::format(
                path,
                "header",
                format!("expected {} header bytes, file has {}", 4 * words, bytes.len()),
            ));
        }
        Ok(bytes[..4 * words]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    let ih = header(images, images_path, 4)?;
    if ih[0] != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            images_path,
            "magic",
            format!("expected 0x{IDX_IMAGES_MAGIC:08x}, found 0x{:08x}", ih[0]),
        ));
    }
    let (n, rows, cols) = (ih[1] as usize, ih[2] as usize, ih[3] as usize);
    let pixels = rows * cols;
    let expected = 16 + n * pixels;
    if images.len() != expected {
        return Err(Error::format(
            images_path,
            "payload",
            format!(
                "header declares {n} images of {rows}x{cols} ({expected} bytes) but the file has {} bytes",
                images.len()
            ),
        ));
    }

    let lh = header(labels, labels_path, 2)?;
    if lh[0] != IDX_LABELS_MAGIC {
        return Err(Error::format(
            labels_path,
            "magic",
            format!("expected 0x{IDX_LABELS_MAGIC:08x}, found 0x{:08x}", lh[0]),
        ));
    }
    let n_labels = lh[1] as usize;
    if labels.len() != 8 + n_labels {
        return Err(Error::format(
            labels_path,
            "payload",
            format!(
                "header declares {n_labels} labels but the file holds {}",
                labels.len().saturating_sub(8)
            ),
        ));
    }
    if n_labels != n {
        return Err(Error::format(
            labels_path,
            "count",
            format!("labels file has {n_labels} labels but the images file has {n} images"),
        ));
    }
    if n == 0 || pixels == 0 {
        return Err(Error::format(images_path, "header", "no samples"));
    }

    let features = Matrix::new(
        n,
        pixels,
        images[16..].iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels[8..].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::new(features, labels, n_classes, Split::Train)
}

/// Parameters of the synthetic Gaussian-blob task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub seed: u64,
}

/// Per-coordinate noise scale before any separation adjustment.
const BLOB_SIGMA: f64 = 0.1;

impl SyntheticSpec {
    /// Class means and the noise scale. Means are uniform in
    /// `[0.2, 0.8]^dim`; sigma is shrunk if needed so that every pair of
    /// means is at least `6σ` apart.
    pub fn centers(&self) -> Result<(Matrix, f64)> {
        if self.n_classes == 0 || self.dim == 0 || self.per_class == 0 {
            return Err(Error::domain("synthetic blobs need positive sizes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let uniform = Uniform::new(0.2, 0.8).expect("valid range");
        let means = Matrix::from_fn(self.n_classes, self.dim, |_, _| uniform.sample(&mut rng));
        let mut min_dist = f64::INFINITY;
        for a in 0..self.n_classes {
            for b in a + 1..self.n_classes {
                min_dist = min_dist.min(squared_distance(means.row(a), means.row(b)).sqrt());
            }
        }
        Ok((means, BLOB_SIGMA.min(min_dist / 6.0)))
    }

    /// Samples for one split; train and test share class means but draw
    /// independent noise. Labels cycle through the classes.
    pub fn generate(&self, split: Split) -> Result<Dataset> {
        let (means, sigma) = self.centers()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(match split {
            Split::Train => 1,
            Split::Test => 2,
        });
        let noise = Normal::new(0.0, sigma).expect("positive sigma");
        let n = self.n_classes * self.per_class;
        let labels: Vec<usize> = (0..n).map(|i| i % self.n_classes).collect();
        let features = Matrix::from_fn(n, self.dim, |i, j| {
            (means[(labels[i], j)] + noise.sample(&mut rng)).clamp(0.0, 1.0)
        });
        Dataset::new(features, labels, self.n_classes, split)
    }
}

/// Training split of the synthetic blob task.
pub fn synthetic_blobs(n_classes: usize, dim: usize, per_class: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec {
        n_classes,
        dim,
        per_class,
        seed,
    }
    .generate(Split::Train)
}

/// Sample indices of `n` items split into batches after a permutation
/// determined by `(seed, epoch)`. The final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, epoch: u64, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::domain("batch size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
