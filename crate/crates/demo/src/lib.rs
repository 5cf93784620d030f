//! Browser demo built on `clusterlab`.
//!
//! Three operations, each returning a JSON string for the page to render:
//! [`explore_bsgc`] recovers planted blocks from a shuffled matrix,
//! [`TrainingSession`] trains a small network step by step with the
//! clusterability penalty, and [`theory_table`] runs the capacity
//! calculators. The wasm bindings live in `wasm` and only wrap these.

use clusterlab::clustering::weight_similarity;
use clusterlab::datahub::SyntheticSpec;
use clusterlab::modmetrics::random_baseline;
use clusterlab::theory::{
    jl_capacity, modular_capacity_comparison, polytope_bound_dense, polytope_pair_count_dense,
    polytope_pair_count_modular, ModularPartition,
};
use clusterlab::trainer::{evaluate, Trainer};
use clusterlab::{bsgc, clusterability, contiguous_clusters, BiClustering, Dataset, Matrix, Split, TrainPlan};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[cfg(target_arch = "wasm32")]
mod wasm;

pub type DemoResult<T> = std::result::Result<T, String>;

fn err(e: clusterlab::Error) -> String {
    e.to_string()
}

/// A matrix reordered so that each cluster is contiguous.
#[derive(Debug, Clone, Serialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    /// Row-major values after reordering.
    pub values: Vec<f64>,
    /// Cluster of each displayed row and column.
    pub row_cluster: Vec<usize>,
    pub col_cluster: Vec<usize>,
}

impl Heatmap {
    pub fn sorted(w: &Matrix, c: &BiClustering) -> Self {
        let mut row_order: Vec<usize> = (0..w.rows()).collect();
        let mut col_order: Vec<usize> = (0..w.cols()).collect();
        row_order.sort_by_key(|&i| (c.row_assign()[i], i));
        col_order.sort_by_key(|&j| (c.col_assign()[j], j));
        Self {
            rows: w.rows(),
            cols: w.cols(),
            values: row_order
                .iter()
                .flat_map(|&i| col_order.iter().map(move |&j| w[(i, j)]))
                .collect(),
            row_cluster: row_order.iter().map(|&i| c.row_assign()[i]).collect(),
            col_cluster: col_order.iter().map(|&j| c.col_assign()[j]).collect(),
        }
    }

    pub fn raw(w: &Matrix) -> Self {
        Self {
            rows: w.rows(),
            cols: w.cols(),
            values: w.as_slice().to_vec(),
            row_cluster: vec![0; w.rows()],
            col_cluster: vec![0; w.cols()],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BsgcExplorer {
    pub k: usize,
    pub shuffled: Heatmap,
    pub recovered: Heatmap,
    pub clusterability: f64,
    pub planted_clusterability: f64,
    pub baseline: f64,
    /// Fraction of row pairs (column pairs) on which the recovered and the
    /// planted partition agree about sharing a cluster.
    pub row_agreement: f64,
    pub col_agreement: f64,
}

fn pair_agreement(a: &[usize], b: &[usize]) -> f64 {
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            agree += usize::from((a[i] == a[j]) == (b[i] == b[j]));
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

/// Plants `k` contiguous blocks with weights in `[0.5, 1]` and background
/// weights in `[0, noise]`, shuffles rows and columns, then clusters the
/// shuffled matrix.
pub fn explore_bsgc(rows: usize, cols: usize, k: usize, noise: f64, seed: u64) -> DemoResult<BsgcExplorer> {
    if !(0.0..=1.0).contains(&noise) {
        return Err(format!("noise must lie in [0, 1], got {noise}"));
    }
    let truth = contiguous_clusters(rows, cols, k).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let planted = Matrix::from_fn(rows, cols, |i, j| {
        if truth.same_module(i, j) {
            rng.random_range(0.5..=1.0)
        } else {
            noise * rng.random::<f64>()
        }
    });
    let mut row_perm: Vec<usize> = (0..rows).collect();
    let mut col_perm: Vec<usize> = (0..cols).collect();
    row_perm.shuffle(&mut rng);
    col_perm.shuffle(&mut rng);
    let w = Matrix::from_fn(rows, cols, |i, j| planted[(row_perm[i], col_perm[j])]);
    let truth_rows: Vec<usize> = row_perm.iter().map(|&i| truth.row_assign()[i]).collect();
    let truth_cols: Vec<usize> = col_perm.iter().map(|&j| truth.col_assign()[j]).collect();
    let shuffled_truth = BiClustering::new(k, truth_rows, truth_cols).map_err(err)?;

    let found = bsgc(&weight_similarity(&w), k, seed).map_err(err)?;
    Ok(BsgcExplorer {
        k,
        shuffled: Heatmap::raw(&w),
        recovered: Heatmap::sorted(&w, &found),
        clusterability: clusterability(&w, &found).map_err(err)?.c,
        planted_clusterability: clusterability(&w, &shuffled_truth).map_err(err)?.c,
        baseline: random_baseline(k).map_err(err)?,
        row_agreement: pair_agreement(found.row_assign(), shuffled_truth.row_assign()),
        col_agreement: pair_agreement(found.col_assign(), shuffled_truth.col_assign()),
    })
}

pub const DEMO_DIMS: [usize; 4] = [32, 24, 24, 4];
/// Layer shown in the heatmap of a training snapshot.
pub const HEATMAP_LAYER: usize = 1;

#[derive(Debug, Clone, Serialize)]
pub struct TrainingSnapshot {
    pub step: usize,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Clusterability of each hidden weight layer, `None` before the
    /// first step selects clusters.
    pub clusterability: Vec<Option<f64>>,
    pub heatmap: Heatmap,
}

/// Training on a 4-class synthetic task that the page advances in small
/// increments.
#[derive(Debug, Clone)]
pub struct TrainingSession {
    trainer: Trainer,
    train: Dataset,
    test: Dataset,
}

impl TrainingSession {
    pub fn new(lambda: f64, k: usize, seed: u64) -> DemoResult<Self> {
        let plan = TrainPlan {
            dims: DEMO_DIMS.to_vec(),
            lambda,
            k,
            batch_size: 32,
            lr: 1e-2,
            seed,
            ..TrainPlan::default()
        };
        let spec = SyntheticSpec {
            n_classes: DEMO_DIMS[3],
            dim: DEMO_DIMS[0],
            per_class: 100,
            seed,
        };
        let train = spec.generate(Split::Train).map_err(err)?;
        let test = SyntheticSpec { per_class: 50, ..spec }.generate(Split::Test).map_err(err)?;
        Ok(Self {
            trainer: Trainer::new(plan).map_err(err)?,
            train,
            test,
        })
    }

    pub fn advance(&mut self, steps: usize) -> DemoResult<TrainingSnapshot> {
        for _ in 0..steps {
            self.trainer.step(&self.train).map_err(err)?;
        }
        self.snapshot()
    }

    pub fn snapshot(&self) -> DemoResult<TrainingSnapshot> {
        let model = self.trainer.model();
        let w = model.weight(HEATMAP_LAYER);
        let clustering = model.clustering(HEATMAP_LAYER);
        let mut cs = Vec::new();
        for l in 0..model.n_layers() - 1 {
            cs.push(match model.clustering(l) {
                Some(c) => Some(clusterability(model.weight(l), c).map_err(err)?.c),
                None => None,
            });
        }
        Ok(TrainingSnapshot {
            step: self.trainer.steps_done(),
            train_acc: evaluate(model, &self.train).map_err(err)?.accuracy,
            test_acc: evaluate(model, &self.test).map_err(err)?.accuracy,
            clusterability: cs,
            heatmap: clustering.map_or_else(|| Heatmap::raw(w), |c| Heatmap::sorted(w, c)),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoryEntry {
    pub calculator: String,
    pub inputs: String,
    /// Exact value in decimal when it is an integer count.
    pub exact: Option<String>,
    pub log2: f64,
}

fn parse_widths(what: &str, text: &str) -> DemoResult<Vec<usize>> {
    let parsed: Result<Vec<usize>, _> = text.split(',').map(|p| p.trim().parse()).collect();
    match parsed {
        Ok(v) if !v.is_empty() && !v.contains(&0) => Ok(v),
        _ => Err(format!("{what}: expected positive integers separated by commas, got `{text}`")),
    }
}

/// Dense polytope bound for `widths`, pair counts for a layer of
/// `n_prev` inputs split into `parts`, the JL capacity for `(jl_n, jl_eps)`
/// and the modular-vs-dense capacity of `parts`.
pub fn theory_table(widths: &str, n_prev: usize, parts: &str, jl_n: usize, jl_eps: f64) -> DemoResult<Vec<TheoryEntry>> {
    let widths_v = parse_widths("widths", widths)?;
    let parts_v = parse_widths("parts", parts)?;
    let width: usize = parts_v.iter().sum();
    let partition = ModularPartition::new(parts_v.clone()).map_err(err)?;
    let mut out = Vec::new();
    let mut count = |calculator: &str, inputs: String, v: clusterlab::theory::BigCount| {
        out.push(TheoryEntry {
            calculator: calculator.into(),
            inputs,
            exact: Some(v.to_decimal()),
            log2: v.log2(),
        })
    };
    count("polytope_bound_dense", format!("widths={widths}"), polytope_bound_dense(&widths_v).map_err(err)?);
    count(
        "polytope_pair_dense",
        format!("n_prev={n_prev} n_l={width}"),
        polytope_pair_count_dense(n_prev, width).map_err(err)?,
    );
    count(
        "polytope_pair_modular",
        format!("n_prev={n_prev} parts={parts}"),
        polytope_pair_count_modular(n_prev, &partition).map_err(err)?,
    );
    let m = jl_capacity(jl_n, jl_eps).map_err(err)?;
    out.push(TheoryEntry {
        calculator: "jl_capacity".into(),
        inputs: format!("n={jl_n} eps={jl_eps}"),
        exact: Some(m.to_string()),
        log2: (m as f64).log2(),
    });
    let cmp = modular_capacity_comparison(&parts_v).map_err(err)?;
    for (name, ln) in [("capacity_modular", cmp.modular_log), ("capacity_dense", cmp.dense_log)] {
        out.push(TheoryEntry {
            calculator: name.into(),
            inputs: format!("parts={parts}"),
            exact: None,
            log2: ln / std::f64::consts::LN_2,
        });
    }
    Ok(out)
}

/// JSON text of any serializable result.
pub fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo values serialize")
}
