//! Modularity measures for a single weight matrix.
//!
//! A layer's weight matrix `W` is oriented input-neurons × output-neurons.
//! Given a [`BiClustering`] that assigns every input neuron (row) and every
//! output neuron (column) one of `k` cluster ids, entry `(i, j)` is
//! *within-module* when row `i` and column `j` carry the same id.
//! Clusterability is the share of squared weight mass that is within-module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Paired partition of a layer's input and output neurons into `k` matched
/// clusters. Cluster `u` on the rows pairs with cluster `u` on the columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawBiClustering")]
pub struct BiClustering {
    k: usize,
    row_assign: Vec<usize>,
    col_assign: Vec<usize>,
}

#[derive(Deserialize)]
struct RawBiClustering {
    k: usize,
    row_assign: Vec<usize>,
    col_assign: Vec<usize>,
}

impl TryFrom<RawBiClustering> for BiClustering {
    type Error = Error;

    fn try_from(raw: RawBiClustering) -> Result<Self> {
        BiClustering::new(raw.k, raw.row_assign, raw.col_assign)
    }
}

impl BiClustering {
    /// Validates that every id lies in `[0, k)` and that every id occurs at
    /// least once on each side.
    pub fn new(k: usize, row_assign: Vec<usize>, col_assign: Vec<usize>) -> Result<Self> {
        if k == 0 {
            return Err(Error::domain("clustering needs k >= 1"));
        }
        for (side, assign) in [("row", &row_assign), ("column", &col_assign)] {
            let mut seen = vec![false; k];
            for (i, &c) in assign.iter().enumerate() {
                if c >= k {
                    return Err(Error::domain(format!(
                        "{side} {i} has cluster id {c}, outside [0, {k})"
                    )));
                }
                seen[c] = true;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::domain(format!(
                    "cluster {missing} has no {side} members"
                )));
            }
        }
        Ok(Self {
            k,
            row_assign,
            col_assign,
        })
    }

    /// One cluster containing everything.
    pub fn single(rows: usize, cols: usize) -> Self {
        Self {
            k: 1,
            row_assign: vec![0; rows],
            col_assign: vec![0; cols],
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row_assign(&self) -> &[usize] {
        &self.row_assign
    }

    pub fn col_assign(&self) -> &[usize] {
        &self.col_assign
    }

    pub fn n_rows(&self) -> usize {
        self.row_assign.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_assign.len()
    }

    #[inline]
    pub fn same_module(&self, row: usize, col: usize) -> bool {
        self.row_assign[row] == self.col_assign[col]
    }

    /// Output neurons (columns) belonging to cluster `c`.
    pub fn col_members(&self, c: usize) -> Vec<usize> {
        (0..self.n_cols()).filter(|&j| self.col_assign[j] == c).collect()
    }

    pub(crate) fn check_shape(&self, w: &Matrix) -> Result<()> {
        if w.rows() != self.n_rows() || w.cols() != self.n_cols() {
            return Err(Error::domain(format!(
                "clustering covers {}x{} neurons but the matrix is {}x{}",
                self.n_rows(),
                self.n_cols(),
                w.rows(),
                w.cols()
            )));
        }
        Ok(())
    }
}

/// Clusterability `C` together with the masses it is the ratio of.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterabilityScore {
    pub c: f64,
    /// Σ W_ij² over within-module entries.
    pub within_mass: f64,
    /// Σ W_ij² over all entries.
    pub total_mass: f64,
}

/// `C = Σ_{same module} W_ij² / Σ W_ij²`.
pub fn clusterability(w: &Matrix, clustering: &BiClustering) -> Result<ClusterabilityScore> {
    clustering.check_shape(w)?;
    let mut within = 0.0;
    let mut total = 0.0;
    for i in 0..w.rows() {
        let ri = clustering.row_assign[i];
        for (j, &x) in w.row(i).iter().enumerate() {
            let sq = x * x;
            total += sq;
            if clustering.col_assign[j] == ri {
                within += sq;
            }
        }
    }
    if total == 0.0 {
        return Err(Error::domain(
            "undefined clusterability: the weight matrix is identically zero",
        ));
    }
    Ok(ClusterabilityScore {
        c: within / total,
        within_mass: within,
        total_mass: total,
    })
}

/// Per-layer clusterability loss `1 - C`.
pub fn clusterability_loss(w: &Matrix, clustering: &BiClustering) -> Result<f64> {
    Ok(1.0 - clusterability(w, clustering)?.c)
}

/// Analytic gradient of [`clusterability_loss`]:
/// `∂(1 - C)/∂W_ij = -2 W_ij (𝕀_ij - C) / S` with `S = Σ W²`.
pub fn clusterability_grad(w: &Matrix, clustering: &BiClustering) -> Result<Matrix> {
    let score = clusterability(w, clustering)?;
    let scale = -2.0 / score.total_mass;
    Ok(Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        let indicator = if clustering.same_module(i, j) { 1.0 } else { 0.0 };
        scale * w[(i, j)] * (indicator - score.c)
    }))
}

/// Community structure `Q` of a square non-negative similarity matrix.
///
/// Expected edge weight is `E_ij = (Σ_i' a_i'j)(Σ_j' a_ij') / (2 Σ a)` and
/// `Q = Σ_{same module} (a_ij - E_ij) / (2 Σ a)`. This normalization is
/// not Newman's: a single community scores `1/4` rather than `0`.
pub fn community_structure(a: &Matrix, clustering: &BiClustering) -> Result<f64> {
    if !a.is_square() {
        return Err(Error::domain(format!(
            "community structure needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    clustering.check_shape(a)?;
    if a.as_slice().iter().any(|&x| x < 0.0) {
        return Err(Error::domain("community structure needs non-negative weights"));
    }
    let total = a.sum();
    if total == 0.0 {
        return Err(Error::domain("community structure undefined for an empty graph"));
    }
    let scale = a.max_abs();
    for i in 0..a.rows() {
        for j in i + 1..a.cols() {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::domain(format!(
                    "community structure needs a symmetric matrix; ({i}, {j}) differs from ({j}, {i})"
                )));
            }
        }
    }

    let row_sums = a.row_sums();
    let col_sums = a.col_sums();
    let norm = 2.0 * total;
    let mut q = 0.0;
    for i in 0..a.rows() {
        for j in 0..a.cols() {
            if clustering.same_module(i, j) {
                q += a[(i, j)] - col_sums[j] * row_sums[i] / norm;
            }
        }
    }
    Ok(q / norm)
}

/// Expected clusterability of a structureless layer split into `k` equal
/// clusters: `1/k`.
pub fn random_baseline(k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::domain("random baseline needs k >= 1"));
    }
    Ok(1.0 / k as f64)
}

/// Number of weight positions that connect different modules, and that
/// count as a fraction of the layer's positions.
pub fn cross_module_params(w: &Matrix, clustering: &BiClustering) -> Result<(usize, f64)> {
    clustering.check_shape(w)?;
    let mut row_sizes = vec![0usize; clustering.k];
    let mut col_sizes = vec![0usize; clustering.k];
    clustering.row_assign.iter().for_each(|&c| row_sizes[c] += 1);
    clustering.col_assign.iter().for_each(|&c| col_sizes[c] += 1);
    let within: usize = row_sizes.iter().zip(&col_sizes).map(|(r, c)| r * c).sum();
    let total = w.rows() * w.cols();
    let count = total - within;
    Ok((count, count as f64 / total as f64))
}
