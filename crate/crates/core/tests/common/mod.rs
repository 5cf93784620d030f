#![allow(dead_code)]

use clusterlab::{BiClustering, Matrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Uniformly shuffled equal-size (up to one) labels for `n` items.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    labels.shuffle(rng);
    labels
}

pub fn random_clustering(rng: &mut ChaCha8Rng, rows: usize, cols: usize, k: usize) -> BiClustering {
    let r = random_labels(rng, rows, k);
    let c = random_labels(rng, cols, k);
    BiClustering::new(k, r, c).unwrap()
}

/// Clusterability straight from the definition, no shared code.
pub fn brute_force_c(w: &Matrix, rows: &[usize], cols: &[usize]) -> f64 {
    let mut within = 0.0;
    let mut total = 0.0;
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let sq = w[(i, j)] * w[(i, j)];
            total += sq;
            if rows[i] == cols[j] {
                within += sq;
            }
        }
    }
    within / total
}

/// Two labelings are equal up to a renaming of the ids.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// Block matrix with `k` planted blocks of ones, uniform off-block noise in
/// `[0, noise]`, rows and columns shuffled. Returns the matrix and the
/// planted row/column labels.
pub fn planted(seed: u64, rows: usize, cols: usize, k: usize, noise: f64) -> (Matrix, Vec<usize>, Vec<usize>) {
    let mut r = rng(seed);
    let row_labels = random_labels(&mut r, rows, k);
    let col_labels = random_labels(&mut r, cols, k);
    let a = Matrix::from_fn(rows, cols, |i, j| {
        if row_labels[i] == col_labels[j] {
            1.0
        } else {
            r.random_range(0.0..=noise)
        }
    });
    (a, row_labels, col_labels)
}
