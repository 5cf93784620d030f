//! Modularity tooling for small bias-free ReLU networks.
//!
//! The crate trains multilayer perceptrons with a differentiable
//! *clusterability* penalty, discovers neuron clusters with bipartite
//! spectral co-clustering, and analyses the resulting models:
//!
//! - [`modmetrics`]: clusterability `C`, its loss `1 - C` and analytic
//!   gradient, community structure `Q`, and cross-module parameter counts.
//! - [`clustering`]: weight- and gradient-based similarity matrices,
//!   bipartite spectral graph clustering, contiguous clusterings and
//!   label alignment.
//! - [`network`]: the MLP itself with exact backprop, Adam, weight masks,
//!   activation interventions and a JSON checkpoint format.
//! - [`trainer`]: the warmup / select clusters / regularized-training
//!   pipeline and the maximum-clusterability sweep.
//! - [`analysis`]: cluster interventions, sufficiency histograms,
//!   null-dependency fractions and effective circuit size.
//! - [`theory`]: polytope-count and Johnson-Lindenstrauss capacity
//!   calculators for dense versus modular layers.
//! - [`datahub`]: MNIST IDX loading and a seeded synthetic fallback.
//!
//! All computation is in `f64` and every random choice flows from an
//! explicit seed, so runs are bitwise reproducible.

pub mod analysis;
pub mod clustering;
pub mod datahub;
pub mod error;
pub mod modmetrics;
pub mod network;
pub mod numerics;
pub mod report;
pub mod theory;
pub mod trainer;

pub use clustering::{bsgc, bsgc_floored, contiguous_clusters, GradTrace};
pub use datahub::{Dataset, Split};
pub use error::{Error, Result};
pub use modmetrics::{clusterability, BiClustering, ClusterabilityScore};
pub use network::{Intervention, MlpModel};
pub use numerics::Matrix;
pub use trainer::{train, ClusteringSource, TrainHistory, TrainPlan};
