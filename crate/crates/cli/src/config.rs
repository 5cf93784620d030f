//! Run configuration: a JSON document, overridden by flags, overridden in
//! turn by `CLUSTERLAB_OUT` for the output directory.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use clusterlab::analysis::EcsConfig;
use clusterlab::datahub::{load_mnist_dir, SyntheticSpec};
use clusterlab::{Dataset, Split, TrainPlan};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const OUT_ENV: &str = "CLUSTERLAB_OUT";

const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub mnist_dir: Option<PathBuf>,
    /// Keep only the first `train_limit` training samples.
    pub train_limit: Option<usize>,
    /// Training split of the synthetic task.
    pub synthetic: SyntheticSpec,
    /// Test samples per class of the synthetic task.
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            mnist_dir: None,
            train_limit: None,
            synthetic: SyntheticSpec {
                n_classes: 10,
                dim: 784,
                per_class: 1000,
                seed: 0,
            },
            test_per_class: 200,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match self.kind {
            DatasetKind::Mnist => {
                let dir = self
                    .mnist_dir
                    .as_ref()
                    .ok_or_else(|| CliError::config("dataset.mnist_dir: required for the mnist dataset"))?;
                for f in MNIST_FILES {
                    if !dir.join(f).is_file() {
                        return Err(CliError::config(format!(
                            "dataset.mnist_dir: {} does not exist",
                            dir.join(f).display()
                        )));
                    }
                }
            }
            DatasetKind::Synthetic => {
                let s = &self.synthetic;
                if s.n_classes == 0 || s.dim == 0 || s.per_class == 0 || self.test_per_class == 0 {
                    return Err(CliError::config("dataset.synthetic: sizes must be positive"));
                }
            }
        }
        if self.train_limit == Some(0) {
            return Err(CliError::config("dataset.train_limit: must be positive"));
        }
        Ok(())
    }

    /// Training and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset), CliError> {
        let (train, test) = match self.kind {
            DatasetKind::Mnist => load_mnist_dir(self.mnist_dir.as_deref().expect("validated"))?,
            DatasetKind::Synthetic => {
                let test_spec = SyntheticSpec {
                    per_class: self.test_per_class,
                    ..self.synthetic
                };
                (self.synthetic.generate(Split::Train)?, test_spec.generate(Split::Test)?)
            }
        };
        Ok(match self.train_limit {
            Some(n) => (train.take(n), test),
            None => (train, test),
        })
    }

    /// Feature count the loaded data will have.
    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::Mnist => 784,
            DatasetKind::Synthetic => self.synthetic.dim,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub interventions: bool,
    pub histograms: bool,
    pub ecs: bool,
    pub heatmap: bool,
    /// Layers to analyze; `None` means every clustered layer.
    pub layers: Option<Vec<usize>>,
    pub ecs_config: EcsConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub plan: TrainPlan,
    pub dataset: DatasetConfig,
    pub out: Option<PathBuf>,
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("--config: cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
    }

    /// Output directory after the environment override; `out` when unset.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.plan.validate().map_err(|e| CliError::config(format!("plan.{e}")))?;
        self.dataset.validate()?;
        let dim = self.dataset.dim();
        if dim != self.plan.dims[0] {
            return Err(CliError::config(format!(
                "plan.dims: dims[0] = {} but the dataset has {dim} features",
                self.plan.dims[0]
            )));
        }
        Ok(())
    }
}
