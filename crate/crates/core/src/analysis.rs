//! Intervention studies and effective circuit sizes.
//!
//! Interventions zero-ablate the output neurons of a clustered layer by
//! cluster and measure what the rest of the network can still classify.
//! The effective circuit of a label is what survives magnitude pruning
//! gated on that label's accuracy and loss.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::datahub::Dataset;
use crate::error::{Error, Result};
use crate::network::{argmax_rows, softmax_rows, Intervention, InterventionMode, MlpModel, WeightMask};
use crate::numerics::Matrix;
use crate::trainer::summarize;

const CHUNK: usize = 1024;

fn predictions(model: &MlpModel, data: &Dataset, iv: Option<&Intervention>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, _) = data.batch(chunk);
        out.extend(argmax_rows(&model.forward_with(&x, iv)?.0));
    }
    Ok(out)
}

fn layer_k(model: &MlpModel, layer: usize) -> Result<usize> {
    if layer >= model.n_layers() {
        return Err(Error::domain(format!(
            "layer {layer} does not exist; the model has {} layers",
            model.n_layers()
        )));
    }
    model
        .clustering(layer)
        .map(|c| c.k())
        .ok_or_else(|| Error::domain(format!("layer {layer} has no clustering")))
}

/// Per-class accuracy with each cluster of one layer switched ON (alone)
/// or OFF (removed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionMatrix {
    pub mode: InterventionMode,
    pub layer: usize,
    /// `accuracy[c][y]`; `None` where the dataset has no sample of class `y`.
    pub accuracy: Vec<Vec<Option<f64>>>,
}

impl InterventionMatrix {
    pub fn k(&self) -> usize {
        self.accuracy.len()
    }
}

pub fn intervention_matrix(
    model: &MlpModel,
    layer: usize,
    mode: InterventionMode,
    data: &Dataset,
) -> Result<InterventionMatrix> {
    let k = layer_k(model, layer)?;
    if data.is_empty() {
        return Err(Error::domain("cannot intervene on an empty dataset"));
    }
    let n_classes = model.n_classes().max(data.n_classes());
    let zeros = vec![0.0; data.len()];
    let accuracy = (0..k)
        .map(|c| {
            let iv = model.intervention(layer, c, mode)?;
            let preds = predictions(model, data, Some(&iv))?;
            Ok(summarize(&preds, &zeros, data.labels(), n_classes).per_class_accuracy)
        })
        .collect::<Result<_>>()?;
    Ok(InterventionMatrix { mode, layer, accuracy })
}

/// Indices of the samples the unmodified model classifies correctly.
pub fn eligible_samples(model: &MlpModel, data: &Dataset) -> Result<Vec<usize>> {
    let preds = predictions(model, data, None)?;
    Ok(preds
        .iter()
        .zip(data.labels())
        .enumerate()
        .filter(|(_, (p, y))| p == y)
        .map(|(i, _)| i)
        .collect())
}

/// How many clusters are individually sufficient for each eligible sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyHistogram {
    pub layer: usize,
    pub k: usize,
    pub eligible_count: usize,
    /// `counts[s]`: eligible samples with exactly `s` sufficient clusters.
    pub counts: Vec<usize>,
}

impl SufficiencyHistogram {
    /// `counts` indexed by `N = k - s`, the number of clusters that are not
    /// sufficient.
    pub fn not_sufficient_counts(&self) -> Vec<usize> {
        self.counts.iter().rev().copied().collect()
    }

    pub fn fraction(&self, s: usize) -> f64 {
        self.counts[s] as f64 / self.eligible_count as f64
    }
}

fn eligible_subset(model: &MlpModel, data: &Dataset) -> Result<Dataset> {
    let eligible = eligible_samples(model, data)?;
    if eligible.is_empty() {
        return Err(Error::domain(
            "the model classifies no sample correctly; nothing is eligible",
        ));
    }
    Ok(data.subset(&eligible))
}

pub fn sufficiency_histogram(model: &MlpModel, layer: usize, data: &Dataset) -> Result<SufficiencyHistogram> {
    let k = layer_k(model, layer)?;
    let eligible = eligible_subset(model, data)?;
    let mut sufficient = vec![0usize; eligible.len()];
    for c in 0..k {
        let iv = model.intervention(layer, c, InterventionMode::On)?;
        let preds = predictions(model, &eligible, Some(&iv))?;
        for ((s, p), y) in sufficient.iter_mut().zip(&preds).zip(eligible.labels()) {
            if p == y {
                *s += 1;
            }
        }
    }
    let mut counts = vec![0usize; k + 1];
    for s in sufficient {
        counts[s] += 1;
    }
    Ok(SufficiencyHistogram {
        layer,
        k,
        eligible_count: eligible.len(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDependency {
    pub modules_on: usize,
    pub eligible_count: usize,
    /// Eligible samples that no subset of `modules_on` clusters classifies
    /// correctly.
    pub unsolved: usize,
    pub fraction: f64,
}

/// Fraction of eligible samples that no combination of `modules_on`
/// clusters (all others ablated) classifies correctly.
pub fn null_dependency(model: &MlpModel, layer: usize, data: &Dataset, modules_on: usize) -> Result<NullDependency> {
    let k = layer_k(model, layer)?;
    if modules_on == 0 || modules_on > k {
        return Err(Error::domain(format!(
            "modules_on must be between 1 and k = {k}, got {modules_on}"
        )));
    }
    let eligible = eligible_subset(model, data)?;
    let mut solved = vec![false; eligible.len()];
    for subset in (0..k).combinations(modules_on) {
        let iv = model.keep_clusters(layer, &subset)?;
        let preds = predictions(model, &eligible, Some(&iv))?;
        for ((s, p), y) in solved.iter_mut().zip(&preds).zip(eligible.labels()) {
            *s |= p == y;
        }
    }
    let unsolved = solved.iter().filter(|&&s| !s).count();
    Ok(NullDependency {
        modules_on,
        eligible_count: eligible.len(),
        unsolved,
        fraction: unsolved as f64 / eligible.len() as f64,
    })
}

/// Settings of the pruning search behind [`effective_circuit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcsConfig {
    /// Weights removed per trial, as a fraction of the prunable weights.
    pub chunk_fraction: f64,
    /// Largest tolerated absolute accuracy drop.
    pub accuracy_drop: f64,
    /// Largest tolerated relative rise of the mean loss.
    pub loss_rise: f64,
    /// Layers eligible for pruning; `None` means all.
    pub prunable_layers: Option<Vec<usize>>,
    /// Evaluate one-vs-rest on the whole dataset instead of on the
    /// label's samples only.
    pub include_negatives: bool,
    /// Cap on the number of evaluation samples (first ones kept).
    pub max_samples: Option<usize>,
}

impl Default for EcsConfig {
    fn default() -> Self {
        Self {
            chunk_fraction: 0.005,
            accuracy_drop: 0.01,
            loss_rise: 0.10,
            prunable_layers: None,
            include_negatives: false,
            max_samples: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassRecord {
    pub pass: usize,
    pub removed: usize,
    pub restored: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcsReport {
    pub label: usize,
    pub nonzero: usize,
    pub total: usize,
    pub ecs: f64,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub baseline_loss: f64,
    pub final_loss: f64,
    pub chunk_size: usize,
    pub config: EcsConfig,
    pub passes: Vec<PassRecord>,
}

/// The pruned model together with its report.
#[derive(Debug, Clone)]
pub struct EffectiveCircuit {
    pub report: EcsReport,
    pub model: MlpModel,
}

struct Gate {
    x: Matrix,
    positive: Vec<bool>,
    label: usize,
}

impl Gate {
    fn new(data: &Dataset, label: usize, config: &EcsConfig) -> Result<Self> {
        let mut idx: Vec<usize> = if config.include_negatives {
            (0..data.len()).collect()
        } else {
            data.class_indices(label)
        };
        if let Some(cap) = config.max_samples {
            idx.truncate(cap);
        }
        if idx.is_empty() {
            return Err(Error::domain(format!("no samples of label {label}")));
        }
        let (x, y) = data.batch(&idx);
        Ok(Self {
            x,
            positive: y.iter().map(|&c| c == label).collect(),
            label,
        })
    }

    /// Accuracy and mean loss. On positives a sample is correct when the
    /// label wins; on negatives when it does not. The loss is `-ln p` of
    /// the label for positives and `-ln(1 - p)` for negatives.
    fn measure(&self, model: &MlpModel) -> Result<(f64, f64)> {
        let logits = model.logits(&self.x)?;
        let probs = softmax_rows(&logits);
        let preds = argmax_rows(&logits);
        let mut correct = 0usize;
        let mut loss = 0.0;
        for (i, &pos) in self.positive.iter().enumerate() {
            let p = probs[(i, self.label)];
            if (preds[i] == self.label) == pos {
                correct += 1;
            }
            loss -= if pos { p.max(f64::MIN_POSITIVE).ln() } else { (1.0 - p).max(f64::MIN_POSITIVE).ln() };
        }
        let n = self.positive.len() as f64;
        Ok((correct as f64 / n, loss / n))
    }
}

/// Magnitude pruning of `model` gated on label `label`.
///
/// Weights of the prunable layers are visited in ascending `|w|` order
/// (ties by layer, row, column) in chunks. A chunk is kept removed if
/// accuracy stays within `accuracy_drop` of the baseline and the mean loss
/// does not rise by more than `loss_rise`; otherwise it is restored and
/// frozen. Passes repeat until one removes nothing.
pub fn effective_circuit(model: &MlpModel, data: &Dataset, label: usize, config: &EcsConfig) -> Result<EffectiveCircuit> {
    if !(config.chunk_fraction > 0.0 && config.chunk_fraction <= 1.0) {
        return Err(Error::domain("chunk_fraction must lie in (0, 1]"));
    }
    if label >= model.n_classes() {
        return Err(Error::domain(format!("label {label} out of range")));
    }
    let layers: Vec<usize> = match &config.prunable_layers {
        Some(ls) => {
            if let Some(&bad) = ls.iter().find(|&&l| l >= model.n_layers()) {
                return Err(Error::domain(format!("prunable layer {bad} does not exist")));
            }
            ls.iter().copied().sorted().dedup().collect()
        }
        None => (0..model.n_layers()).collect(),
    };
    let gate = Gate::new(data, label, config)?;
    let (base_acc, base_loss) = gate.measure(model)?;
    if base_acc == 0.0 {
        return Err(Error::domain(format!("baseline accuracy on label {label} is zero")));
    }
    let acc_floor = base_acc - config.accuracy_drop;
    let loss_ceiling = base_loss * (1.0 + config.loss_rise);

    let mut model = model.clone();
    let mut masks: Vec<WeightMask> = (0..model.n_layers())
        .map(|l| {
            model.mask(l).cloned().unwrap_or_else(|| {
                let (r, c) = model.weight(l).shape();
                WeightMask::all_active(r, c)
            })
        })
        .collect();
    let prunable: usize = layers.iter().map(|&l| masks[l].as_slice().iter().filter(|&&a| a).count()).sum();
    let chunk_size = ((config.chunk_fraction * prunable as f64).floor() as usize).max(1);

    let mut frozen: Vec<Vec<bool>> = masks.iter().map(|m| vec![false; m.as_slice().len()]).collect();
    let mut passes = Vec::new();
    let (mut acc, mut loss) = (base_acc, base_loss);
    loop {
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for &l in &layers {
            let w = model.weight(l);
            for (idx, &x) in w.as_slice().iter().enumerate() {
                if masks[l].as_slice()[idx] && !frozen[l][idx] {
                    candidates.push((x.abs(), l, idx));
                }
            }
        }
        // Stable sort keeps (layer, index) order among equal magnitudes.
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0));

        let mut record = PassRecord {
            pass: passes.len(),
            removed: 0,
            restored: 0,
        };
        for chunk in candidates.chunks(chunk_size) {
            let saved: Vec<f64> = chunk.iter().map(|&(_, l, idx)| model.weight(l).as_slice()[idx]).collect();
            for &(_, l, idx) in chunk {
                model.weights_mut()[l].as_mut_slice()[idx] = 0.0;
            }
            let (a, lo) = gate.measure(&model)?;
            if a >= acc_floor && lo <= loss_ceiling {
                for &(_, l, idx) in chunk {
                    let cols = masks[l].shape().1;
                    masks[l].set(idx / cols, idx % cols, false);
                }
                record.removed += chunk.len();
                (acc, loss) = (a, lo);
            } else {
                for (&(_, l, idx), &v) in chunk.iter().zip(&saved) {
                    model.weights_mut()[l].as_mut_slice()[idx] = v;
                    frozen[l][idx] = true;
                }
                record.restored += chunk.len();
            }
        }
        let done = record.removed == 0;
        passes.push(record);
        if done {
            break;
        }
    }
    for (l, m) in masks.into_iter().enumerate() {
        if m.as_slice().iter().any(|&a| !a) {
            model.set_mask(l, Some(m))?;
        }
    }
    let nonzero = model.nonzero_count();
    let total = model.param_count();
    Ok(EffectiveCircuit {
        report: EcsReport {
            label,
            nonzero,
            total,
            ecs: nonzero as f64 / total as f64,
            baseline_accuracy: base_acc,
            final_accuracy: acc,
            baseline_loss: base_loss,
            final_loss: loss,
            chunk_size,
            config: config.clone(),
            passes,
        },
        model,
    })
}

/// Effective circuits for every label that has samples in `data`.
pub fn effective_circuits(model: &MlpModel, data: &Dataset, config: &EcsConfig) -> Result<Vec<EcsReport>> {
    (0..data.n_classes())
        .filter(|&y| !data.class_indices(y).is_empty())
        .map(|y| effective_circuit(model, data, y, config).map(|c| c.report))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcsComparisonRow {
    pub label: usize,
    pub ecs_a: f64,
    pub ecs_b: f64,
    pub pct_increase: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EcsComparison {
    pub rows: Vec<EcsComparisonRow>,
    pub mean_pct_increase: f64,
}

/// Per-label `100 · (ecs_b - ecs_a) / ecs_a` from two sets of reports.
pub fn compare_reports(a: &[EcsReport], b: &[EcsReport]) -> Result<EcsComparison> {
    let labels_a: Vec<usize> = a.iter().map(|r| r.label).collect();
    let labels_b: Vec<usize> = b.iter().map(|r| r.label).collect();
    if let Some(y) = labels_a.iter().chain(&labels_b).find(|y| !(labels_a.contains(y) && labels_b.contains(y))) {
        return Err(Error::domain(format!("label {y} was evaluated for only one of the models")));
    }
    if a.is_empty() {
        return Err(Error::domain("no labels to compare"));
    }
    let rows: Vec<EcsComparisonRow> = a
        .iter()
        .map(|ra| {
            let rb = b.iter().find(|r| r.label == ra.label).unwrap();
            EcsComparisonRow {
                label: ra.label,
                ecs_a: ra.ecs,
                ecs_b: rb.ecs,
                pct_increase: 100.0 * (rb.ecs - ra.ecs) / ra.ecs,
            }
        })
        .collect();
    let mean_pct_increase = rows.iter().map(|r| r.pct_increase).sum::<f64>() / rows.len() as f64;
    Ok(EcsComparison { rows, mean_pct_increase })
}

/// Effective circuits of both models on every label. A label whose
/// circuit exists for one model only is an error; labels neither model
/// classifies at all are skipped.
pub fn effective_circuit_pairs(
    model_a: &MlpModel,
    model_b: &MlpModel,
    data: &Dataset,
    config: &EcsConfig,
) -> Result<(Vec<EcsReport>, Vec<EcsReport>)> {
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    for y in (0..data.n_classes()).filter(|&y| !data.class_indices(y).is_empty()) {
        let a = effective_circuit(model_a, data, y, config);
        let b = effective_circuit(model_b, data, y, config);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                ra.push(a.report);
                rb.push(b.report);
            }
            (Err(_), Err(_)) => {}
            (Ok(_), Err(e)) | (Err(e), Ok(_)) => {
                return Err(Error::domain(format!("label {y} has a circuit in one model only: {e}")))
            }
        }
    }
    Ok((ra, rb))
}

/// [`effective_circuit_pairs`] followed by [`compare_reports`].
pub fn ecs_compare(model_a: &MlpModel, model_b: &MlpModel, data: &Dataset, config: &EcsConfig) -> Result<EcsComparison> {
    let (ra, rb) = effective_circuit_pairs(model_a, model_b, data, config)?;
    compare_reports(&ra, &rb)
}
