//! Choosing clusterings for a layer.
//!
//! [`bsgc`] is bipartite spectral graph clustering: degree-normalize a
//! non-negative similarity matrix between a layer's input and output
//! neurons, embed both sides with a truncated SVD, and run k-means on each
//! side. The similarity can come from the weights ([`weight_similarity`])
//! or from gradients accumulated during training ([`GradTrace`]).

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modmetrics::BiClustering;
use crate::numerics::{kmeans, svd_truncated, Matrix};

/// Row or column degrees below this are treated as zero.
pub const DEGREE_FLOOR: f64 = 1e-12;

/// Largest `k` for which label alignment enumerates permutations.
pub const MAX_ALIGN_K: usize = 8;

/// `|W|`, the non-negative similarity used by weight-based clustering.
pub fn weight_similarity(w: &Matrix) -> Matrix {
    w.map(f64::abs)
}

/// Running sum of per-step normalized gradient magnitudes for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradTrace {
    accumulator: Matrix,
    step_count: usize,
}

impl GradTrace {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            accumulator: Matrix::zeros(rows, cols),
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn accumulator(&self) -> &Matrix {
        &self.accumulator
    }

    /// Adds `|G| / ‖G‖_F` to the accumulator. All-zero gradients are
    /// skipped and not counted.
    pub fn record(&mut self, grad: &Matrix) -> Result<()> {
        self.accumulator.check_same_shape(grad)?;
        let norm = grad.frobenius_norm();
        if norm == 0.0 {
            return Ok(());
        }
        for (acc, g) in self
            .accumulator
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
        {
            *acc += g.abs() / norm;
        }
        self.step_count += 1;
        Ok(())
    }
}

/// Functional form of [`GradTrace::record`].
pub fn record_gradient_step(mut trace: GradTrace, grad: &Matrix) -> Result<GradTrace> {
    trace.record(grad)?;
    Ok(trace)
}

/// Average normalized gradient magnitude per parameter; every entry lies
/// in `[0, 1]`.
pub fn gradient_similarity(trace: &GradTrace) -> Result<Matrix> {
    if trace.step_count == 0 {
        return Err(Error::domain(
            "gradient similarity needs at least one recorded step",
        ));
    }
    Ok(trace.accumulator.scale(1.0 / trace.step_count as f64))
}

/// Bipartite spectral graph clustering of a non-negative `rows × cols`
/// similarity matrix into `k` matched clusters.
///
/// `Ã = D_U^{-1/2} A D_V^{-1/2}`; the rows of the top-`k` left singular
/// vectors embed input neurons and the rows of the right singular vectors
/// embed output neurons. Each side is clustered with k-means and the
/// column labels are then aligned to the row labels.
pub fn bsgc(a: &Matrix, k: usize, seed: u64) -> Result<BiClustering> {
    spectral_coclustering(a, k, seed, true)
}

/// [`bsgc`] for similarity matrices with dead neurons: degrees are clamped
/// to [`DEGREE_FLOOR`] instead of rejected, so all-zero rows and columns
/// embed at the origin and join whichever cluster lies nearest to it.
pub fn bsgc_floored(a: &Matrix, k: usize, seed: u64) -> Result<BiClustering> {
    spectral_coclustering(a, k, seed, false)
}

fn spectral_coclustering(a: &Matrix, k: usize, seed: u64, strict: bool) -> Result<BiClustering> {
    let (m, n) = a.shape();
    if k == 0 || k > m.min(n) {
        return Err(Error::domain(format!(
            "bsgc needs 1 <= k <= {} for a {m}x{n} matrix, got k = {k}",
            m.min(n)
        )));
    }
    if let Some(pos) = a.as_slice().iter().position(|&x| x < 0.0) {
        return Err(Error::domain(format!(
            "bsgc similarity must be non-negative; entry ({}, {}) is negative",
            pos / n,
            pos % n
        )));
    }
    let row_deg = a.row_sums();
    let col_deg = a.col_sums();
    if let Some(i) = row_deg.iter().position(|&d| strict && d < DEGREE_FLOOR) {
        return Err(Error::domain(format!(
            "input neuron {i} has zero degree in the similarity matrix"
        )));
    }
    if let Some(j) = col_deg.iter().position(|&d| strict && d < DEGREE_FLOOR) {
        return Err(Error::domain(format!(
            "output neuron {j} has zero degree in the similarity matrix"
        )));
    }

    let row_scale: Vec<f64> = row_deg.iter().map(|d| 1.0 / d.max(DEGREE_FLOOR).sqrt()).collect();
    let col_scale: Vec<f64> = col_deg.iter().map(|d| 1.0 / d.max(DEGREE_FLOOR).sqrt()).collect();
    let normalized = Matrix::from_fn(m, n, |i, j| a[(i, j)] * row_scale[i] * col_scale[j]);

    let svd = svd_truncated(&normalized, k)?;
    let rows = kmeans(&svd.u, k, seed)?;
    // Same seed on both sides: identical embeddings get identical labels.
    let cols = kmeans(&svd.v, k, seed)?;
    align_biclusters(a, &rows.assignments, &cols.assignments, k)
}

/// Equal contiguous blocks on both sides: neuron `i` of `n` gets id
/// `floor(i·k/n)`.
pub fn contiguous_clusters(n_rows: usize, n_cols: usize, k: usize) -> Result<BiClustering> {
    if k == 0 || k > n_rows.min(n_cols) {
        return Err(Error::domain(format!(
            "contiguous clustering needs 1 <= k <= {}, got k = {k}",
            n_rows.min(n_cols)
        )));
    }
    let ids = |n: usize| (0..n).map(|i| i * k / n).collect::<Vec<_>>();
    BiClustering::new(k, ids(n_rows), ids(n_cols))
}

/// Relabels the column clusters with the permutation of `0..k` that
/// maximizes within-module mass `Σ w²`. Permutations are tried in
/// lexicographic order and only a strict improvement replaces the current
/// best, so an already aligned labeling is returned unchanged.
pub fn align_biclusters(
    w: &Matrix,
    row_assign: &[usize],
    col_assign: &[usize],
    k: usize,
) -> Result<BiClustering> {
    if k > MAX_ALIGN_K {
        return Err(Error::domain(format!(
            "label alignment supports k <= {MAX_ALIGN_K}, got {k}"
        )));
    }
    let unaligned = BiClustering::new(k, row_assign.to_vec(), col_assign.to_vec())?;
    unaligned.check_shape(w)?;

    // mass[u][v]: squared weight between row cluster u and column cluster v.
    let mut mass = vec![vec![0.0; k]; k];
    for i in 0..w.rows() {
        let u = row_assign[i];
        for (j, &x) in w.row(i).iter().enumerate() {
            mass[u][col_assign[j]] += x * x;
        }
    }

    let mut best: Vec<usize> = (0..k).collect();
    let mut best_mass: f64 = (0..k).map(|u| mass[u][u]).sum();
    for perm in (0..k).permutations(k) {
        let within: f64 = perm.iter().enumerate().map(|(u, &v)| mass[u][v]).sum();
        if within > best_mass {
            best_mass = within;
            best = perm;
        }
    }

    // Row cluster u is paired with column cluster best[u].
    let mut relabel = vec![0; k];
    for (u, &v) in best.iter().enumerate() {
        relabel[v] = u;
    }
    let cols = col_assign.iter().map(|&v| relabel[v]).collect();
    BiClustering::new(k, row_assign.to_vec(), cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modmetrics::clusterability;

    #[test]
    fn weight_similarity_is_absolute_value() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.0, 3.0]]).unwrap();
        let expected = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(weight_similarity(&w), expected);
        assert_eq!(weight_similarity(&expected), expected);
    }

    #[test]
    fn grad_trace_normalizes_each_step() {
        let g = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let t = record_gradient_step(GradTrace::new(2, 2), &g).unwrap();
        assert_eq!(t.step_count(), 1);
        assert_eq!(t.accumulator().as_slice(), &[0.6, 0.8, 0.0, 0.0]);

        let t2 = record_gradient_step(t.clone(), &g).unwrap();
        assert_eq!(t2.accumulator().as_slice(), &[1.2, 1.6, 0.0, 0.0]);
        assert_eq!(gradient_similarity(&t2).unwrap(), gradient_similarity(&t).unwrap());

        let scaled = record_gradient_step(GradTrace::new(2, 2), &g.scale(10.0)).unwrap();
        for (a, b) in scaled.accumulator().as_slice().iter().zip(t.accumulator().as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn grad_trace_skips_zero_steps_and_checks_shape() {
        let mut t = GradTrace::new(2, 2);
        t.record(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(t.step_count(), 0);
        assert!(gradient_similarity(&t).is_err());
        assert!(t.record(&Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn contiguous_examples() {
        let c = contiguous_clusters(64, 64, 4).unwrap();
        let expected: Vec<usize> = (0..4).flat_map(|c| std::iter::repeat_n(c, 16)).collect();
        assert_eq!(c.row_assign(), expected.as_slice());
        assert_eq!(c.col_assign(), expected.as_slice());

        assert!(contiguous_clusters(5, 3, 1).unwrap().row_assign().iter().all(|&x| x == 0));

        let c = contiguous_clusters(10, 10, 4).unwrap();
        assert_eq!(c.row_assign(), &[0, 0, 0, 1, 1, 2, 2, 2, 3, 3]);
        assert!(contiguous_clusters(3, 10, 4).is_err());
        assert!(contiguous_clusters(3, 10, 0).is_err());
    }

    #[test]
    fn align_swaps_labels() {
        let w = Matrix::from_fn(4, 4, |i, j| if i / 2 == j / 2 { 1.0 } else { 0.0 });
        let aligned = align_biclusters(&w, &[0, 0, 1, 1], &[1, 1, 0, 0], 2).unwrap();
        assert_eq!(aligned.col_assign(), &[0, 0, 1, 1]);
        assert_eq!(clusterability(&w, &aligned).unwrap().c, 1.0);

        let same = align_biclusters(&w, &[0, 0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(same.col_assign(), &[0, 0, 1, 1]);
        assert!(align_biclusters(&w, &[0; 4], &[0; 4], 9).is_err());
    }

    #[test]
    fn bsgc_rejects_dead_neurons_and_bad_k() {
        let mut a = Matrix::from_fn(4, 4, |_, _| 1.0);
        for j in 0..4 {
            a[(2, j)] = 0.0;
        }
        let err = bsgc(&a, 2, 0).unwrap_err().to_string();
        assert!(err.contains("input neuron 2"), "{err}");
        let ok = Matrix::from_fn(4, 4, |_, _| 1.0);
        assert!(bsgc(&ok, 5, 0).is_err());
        assert!(bsgc(&ok.scale(-1.0), 2, 0).is_err());
    }

    #[test]
    fn bsgc_identity_pairs_rows_with_columns() {
        let c = bsgc(&Matrix::identity(4), 2, 3).unwrap();
        for i in 0..4 {
            assert!(c.same_module(i, i));
        }
        assert_eq!(clusterability(&Matrix::identity(4), &c).unwrap().c, 1.0);
    }

    #[test]
    fn floored_variant_accepts_dead_neurons() {
        let mut a = Matrix::from_fn(6, 6, |i, j| if i / 3 == j / 3 { 1.0 } else { 0.01 });
        a.row_mut(2).fill(0.0);
        assert!(bsgc(&a, 2, 0).unwrap_err().to_string().contains("input neuron 2"));
        let c = bsgc_floored(&a, 2, 0).unwrap();
        assert_eq!(c.row_assign().len(), 6);
        assert!(c.same_module(0, 0) && c.same_module(4, 5));
    }
}
