//! JSON checkpoint format.
//!
//! One UTF-8 JSON document:
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "orientation": "input_by_output",
//!   "dims": [784, 64, 64, 10],
//!   "layers": [{"rows": 784, "cols": 64, "row_major_weights": [...]}, ...],
//!   "clusterings": [null, {"k": 4, "row_assign": [...], "col_assign": [...]}, null],
//!   "masks": [null, {"rows": 64, "cols": 64, "active": [1, 0, ...]}, null],
//!   "plan": {...} | null,
//!   "history": {...} | null,
//!   "grad_traces": [...]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form, so weights survive a
//! save/load cycle bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clustering::GradTrace;
use crate::error::{Error, Result};
use crate::modmetrics::BiClustering;
use crate::numerics::Matrix;
use crate::trainer::{TrainHistory, TrainPlan};

use super::{MlpModel, WeightMask};

pub const FORMAT_VERSION: u64 = 1;
pub const ORIENTATION: &str = "input_by_output";

/// A model together with the metadata of the run that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub plan: Option<TrainPlan>,
    pub history: Option<TrainHistory>,
    /// Gradient traces per layer, when the run recorded them.
    pub grad_traces: Vec<Option<GradTrace>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    rows: usize,
    cols: usize,
    row_major_weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MaskFile {
    rows: usize,
    cols: usize,
    active: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format_version: u64,
    orientation: String,
    dims: Vec<usize>,
    layers: Vec<LayerFile>,
    #[serde(default)]
    clusterings: Vec<Option<BiClustering>>,
    #[serde(default)]
    masks: Vec<Option<MaskFile>>,
    #[serde(default)]
    plan: Option<TrainPlan>,
    #[serde(default)]
    history: Option<TrainHistory>,
    #[serde(default)]
    grad_traces: Vec<Option<GradTrace>>,
}

impl Checkpoint {
    pub fn new(model: MlpModel) -> Self {
        Self {
            model,
            plan: None,
            history: None,
            grad_traces: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let model = &self.model;
        let file = CheckpointFile {
            format_version: FORMAT_VERSION,
            orientation: ORIENTATION.to_string(),
            dims: model.dims().to_vec(),
            layers: model
                .weights()
                .iter()
                .map(|w| LayerFile {
                    rows: w.rows(),
                    cols: w.cols(),
                    row_major_weights: w.as_slice().to_vec(),
                })
                .collect(),
            clusterings: model.clusterings().to_vec(),
            masks: model
                .masks()
                .iter()
                .map(|m| {
                    m.as_ref().map(|m| MaskFile {
                        rows: m.shape().0,
                        cols: m.shape().1,
                        active: m.as_slice().iter().map(|&a| u8::from(a)).collect(),
                    })
                })
                .collect(),
            plan: self.plan.clone(),
            history: self.history.clone(),
            grad_traces: self.grad_traces.clone(),
        };
        let mut text = serde_json::to_string(&file).expect("checkpoint serializes");
        text.push('\n');
        text
    }

    /// Parses a checkpoint document; `origin` only labels errors.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let fail = |location: &str, message: String| Error::format(origin, location, message);
        let value: Value = serde_json::from_str(text).map_err(|e| {
            fail(&format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        match value.get("format_version").and_then(Value::as_u64) {
            Some(FORMAT_VERSION) => {}
            Some(v) => {
                return Err(fail(
                    "format_version",
                    format!("unsupported version {v}, expected {FORMAT_VERSION}"),
                ))
            }
            None => return Err(fail("format_version", "missing or not an integer".into())),
        }
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| fail("document", e.to_string()))?;
        if file.orientation != ORIENTATION {
            return Err(fail(
                "orientation",
                format!("expected \"{ORIENTATION}\", found \"{}\"", file.orientation),
            ));
        }
        let n = file.layers.len();
        if n == 0 || file.dims.len() != n + 1 {
            return Err(fail(
                "dims",
                format!("{} widths do not describe {n} layers", file.dims.len()),
            ));
        }

        let mut weights = Vec::with_capacity(n);
        for (l, layer) in file.layers.into_iter().enumerate() {
            let loc = format!("layers[{l}]");
            if (layer.rows, layer.cols) != (file.dims[l], file.dims[l + 1]) {
                return Err(fail(
                    &loc,
                    format!(
                        "shape {}x{} disagrees with dims ({}x{})",
                        layer.rows,
                        layer.cols,
                        file.dims[l],
                        file.dims[l + 1]
                    ),
                ));
            }
            let w = Matrix::new(layer.rows, layer.cols, layer.row_major_weights)
                .map_err(|e| fail(&loc, e.to_string()))?;
            weights.push(w);
        }
        let mut model = MlpModel::from_weights(weights).map_err(|e| fail("layers", e.to_string()))?;

        for (name, len) in [
            ("clusterings", file.clusterings.len()),
            ("masks", file.masks.len()),
            ("grad_traces", file.grad_traces.len()),
        ] {
            if len != 0 && len != n {
                return Err(fail(name, format!("{len} entries for {n} layers")));
            }
        }
        for (l, c) in file.clusterings.into_iter().enumerate() {
            model
                .set_clustering(l, c)
                .map_err(|e| fail(&format!("clusterings[{l}]"), e.to_string()))?;
        }
        for (l, m) in file.masks.into_iter().enumerate() {
            let loc = format!("masks[{l}]");
            let mask = match m {
                None => None,
                Some(m) => {
                    if m.active.iter().any(|&a| a > 1) {
                        return Err(fail(&loc, "mask entries must be 0 or 1".into()));
                    }
                    let active = m.active.iter().map(|&a| a == 1).collect();
                    Some(WeightMask::from_active(m.rows, m.cols, active).map_err(|e| fail(&loc, e.to_string()))?)
                }
            };
            if let Some(mask) = &mask {
                let w = model.weight(l);
                if let Some(pos) = mask
                    .as_slice()
                    .iter()
                    .zip(w.as_slice())
                    .position(|(&on, &x)| !on && x != 0.0)
                {
                    return Err(fail(
                        &loc,
                        format!("masked weight ({}, {}) is not zero", pos / w.cols(), pos % w.cols()),
                    ));
                }
            }
            model.set_mask(l, mask).map_err(|e| fail(&loc, e.to_string()))?;
        }
        for (l, t) in file.grad_traces.iter().enumerate() {
            if let Some(t) = t {
                if t.accumulator().shape() != model.weight(l).shape() {
                    return Err(fail(
                        &format!("grad_traces[{l}]"),
                        "trace shape does not match the layer".into(),
                    ));
                }
            }
        }
        if let Some(plan) = &file.plan {
            if plan.dims != model.dims() {
                return Err(fail("plan.dims", format!("{:?} disagrees with dims {:?}", plan.dims, model.dims())));
            }
        }
        Ok(Self {
            model,
            plan: file.plan,
            history: file.history,
            grad_traces: file.grad_traces,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

pub fn save_checkpoint(
    model: &MlpModel,
    plan: Option<&TrainPlan>,
    history: Option<&TrainHistory>,
    path: &Path,
) -> Result<()> {
    Checkpoint {
        model: model.clone(),
        plan: plan.cloned(),
        history: history.cloned(),
        grad_traces: Vec::new(),
    }
    .save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
