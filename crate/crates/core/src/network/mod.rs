//! Bias-free ReLU multilayer perceptron.
//!
//! Layer `l` holds a weight matrix oriented `dims[l] × dims[l + 1]`
//! (input × output), so a batch of row vectors propagates as
//! `h_{l+1} = relu(h_l · W_l)`. The last layer is linear and produces
//! logits. Each layer may carry a [`BiClustering`] (used by the
//! clusterability penalty and by interventions) and a pruning mask.

mod adam;
mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modmetrics::BiClustering;
use crate::numerics::Matrix;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, ORIENTATION};

/// Pruning mask for one layer; `true` marks an active weight.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightMask {
    rows: usize,
    cols: usize,
    active: Vec<bool>,
}

impl WeightMask {
    pub fn all_active(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            active: vec![true; rows * cols],
        }
    }

    pub fn from_active(rows: usize, cols: usize, active: Vec<bool>) -> Result<Self> {
        if active.len() != rows * cols {
            return Err(Error::domain(format!(
                "mask has {} entries, expected {rows}x{cols}",
                active.len()
            )));
        }
        Ok(Self { rows, cols, active })
    }

    #[inline]
    pub fn is_active(&self, i: usize, j: usize) -> bool {
        self.active[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, active: bool) {
        self.active[i * self.cols + j] = active;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.active
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Zeroes every inactive position of `m`.
    pub fn apply(&self, m: &mut Matrix) {
        for (x, &on) in m.as_mut_slice().iter_mut().zip(&self.active) {
            if !on {
                *x = 0.0;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    dims: Vec<usize>,
    weights: Vec<Matrix>,
    clusterings: Vec<Option<BiClustering>>,
    masks: Vec<Option<WeightMask>>,
}

/// Activations recorded by a forward pass over one batch.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Pre-activations `h_l · W_l` of every hidden layer.
    pub pre: Vec<Matrix>,
    /// Post-ReLU activations of every hidden layer, after any intervention.
    pub post: Vec<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    /// Keep only the chosen cluster active (sufficiency).
    On,
    /// Switch off only the chosen cluster (necessity).
    Off,
}

impl std::fmt::Display for InterventionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InterventionMode::On => "ON",
            InterventionMode::Off => "OFF",
        })
    }
}

/// Zero-ablation of a subset of a layer's output neurons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Intervention {
    layer: usize,
    keep: Vec<bool>,
}

impl Intervention {
    pub fn layer(&self) -> usize {
        self.layer
    }

    /// Per output neuron of the layer: `true` if its activation survives.
    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    fn apply(&self, act: &mut Matrix) {
        let cols = act.cols();
        for (idx, x) in act.as_mut_slice().iter_mut().enumerate() {
            if !self.keep[idx % cols] {
                *x = 0.0;
            }
        }
    }
}

/// A model with an intervention attached; forwards like the model except
/// that the intervened layer's ablated activations are zero.
#[derive(Debug, Clone)]
pub struct Intervened<'a> {
    pub model: &'a MlpModel,
    pub intervention: Intervention,
}

impl Intervened<'_> {
    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        self.model.forward_with(batch, Some(&self.intervention))
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(batch)?.0))
    }
}

/// Builds the ON/OFF intervention for `cluster` of `layer`'s clustering.
pub fn apply_intervention(
    model: &MlpModel,
    layer: usize,
    cluster: usize,
    mode: InterventionMode,
) -> Result<Intervened<'_>> {
    Ok(Intervened {
        model,
        intervention: model.intervention(layer, cluster, mode)?,
    })
}

impl MlpModel {
    /// He-initialized model: weights of layer `l` are drawn from
    /// `N(0, 2 / dims[l])`.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive standard deviation");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
                Matrix::new(fan_in, fan_out, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_weights(weights)
    }

    /// Model from explicit layer matrices, which must chain
    /// (`weights[l].cols == weights[l + 1].rows`).
    pub fn from_weights(weights: Vec<Matrix>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::domain("a model needs at least one layer"));
        }
        for (l, pair) in weights.windows(2).enumerate() {
            if pair[0].cols() != pair[1].rows() {
                return Err(Error::domain(format!(
                    "layer {l} outputs {} neurons but layer {} expects {}",
                    pair[0].cols(),
                    l + 1,
                    pair[1].rows()
                )));
            }
        }
        let mut dims: Vec<usize> = weights.iter().map(Matrix::rows).collect();
        dims.push(weights.last().unwrap().cols());
        let n = weights.len();
        Ok(Self {
            dims,
            weights,
            clusterings: vec![None; n],
            masks: vec![None; n],
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Number of weight layers (hidden layers + output layer).
    pub fn n_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn output_layer(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn n_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn weight(&self, layer: usize) -> &Matrix {
        &self.weights[layer]
    }

    /// Replaces a layer's weights; masked positions are forced to zero.
    pub fn set_weight(&mut self, layer: usize, w: Matrix) -> Result<()> {
        self.check_layer(layer)?;
        self.weights[layer].check_same_shape(&w)?;
        self.weights[layer] = w;
        if let Some(mask) = &self.masks[layer] {
            mask.apply(&mut self.weights[layer]);
        }
        Ok(())
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    /// Total number of weights.
    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.rows() * w.cols()).sum()
    }

    pub fn nonzero_count(&self) -> usize {
        self.weights
            .iter()
            .map(|w| w.as_slice().iter().filter(|&&x| x != 0.0).count())
            .sum()
    }

    pub fn clustering(&self, layer: usize) -> Option<&BiClustering> {
        self.clusterings.get(layer).and_then(Option::as_ref)
    }

    pub fn clusterings(&self) -> &[Option<BiClustering>] {
        &self.clusterings
    }

    pub fn set_clustering(&mut self, layer: usize, clustering: Option<BiClustering>) -> Result<()> {
        self.check_layer(layer)?;
        if let Some(c) = &clustering {
            c.check_shape(&self.weights[layer])?;
        }
        self.clusterings[layer] = clustering;
        Ok(())
    }

    pub fn mask(&self, layer: usize) -> Option<&WeightMask> {
        self.masks.get(layer).and_then(Option::as_ref)
    }

    pub fn masks(&self) -> &[Option<WeightMask>] {
        &self.masks
    }

    /// Installs (or clears) a pruning mask and zeroes masked weights.
    pub fn set_mask(&mut self, layer: usize, mask: Option<WeightMask>) -> Result<()> {
        self.check_layer(layer)?;
        if let Some(m) = &mask {
            if m.shape() != self.weights[layer].shape() {
                return Err(Error::domain(format!(
                    "mask shape {:?} does not match layer {layer} shape {:?}",
                    m.shape(),
                    self.weights[layer].shape()
                )));
            }
            m.apply(&mut self.weights[layer]);
        }
        self.masks[layer] = mask;
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.weights.len() {
            return Err(Error::domain(format!(
                "layer {layer} does not exist; the model has {} layers",
                self.weights.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<(Matrix, ForwardTrace)> {
        self.forward_with(batch, None)
    }

    /// Forward pass, optionally zero-ablating part of one layer's output.
    /// For the output layer the intervention masks logits.
    pub fn forward_with(
        &self,
        batch: &Matrix,
        intervention: Option<&Intervention>,
    ) -> Result<(Matrix, ForwardTrace)> {
        if batch.cols() != self.dims[0] {
            return Err(Error::domain(format!(
                "batch has {} features but the model expects {}",
                batch.cols(),
                self.dims[0]
            )));
        }
        let hidden = self.weights.len() - 1;
        let mut trace = ForwardTrace {
            pre: Vec::with_capacity(hidden),
            post: Vec::with_capacity(hidden),
        };
        for l in 0..hidden {
            let input = if l == 0 { batch } else { &trace.post[l - 1] };
            let pre = input.matmul(&self.weights[l])?;
            let mut post = pre.map(|x| x.max(0.0));
            if let Some(iv) = intervention.filter(|iv| iv.layer == l) {
                iv.apply(&mut post);
            }
            trace.pre.push(pre);
            trace.post.push(post);
        }
        let input = trace.post.last().unwrap_or(batch);
        let mut logits = input.matmul(&self.weights[hidden])?;
        if let Some(iv) = intervention.filter(|iv| iv.layer == hidden) {
            iv.apply(&mut logits);
        }
        Ok((logits, trace))
    }

    pub fn logits(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward(batch)?.0)
    }

    pub fn predict(&self, batch: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(batch)?))
    }

    /// Mean cross-entropy of `batch` and its gradient with respect to
    /// every layer's weights. Masked positions get zero gradient.
    pub fn backward(&self, batch: &Matrix, labels: &[usize]) -> Result<(f64, Vec<Matrix>)> {
        if labels.len() != batch.rows() {
            return Err(Error::domain(format!(
                "{} labels for a batch of {} samples",
                labels.len(),
                batch.rows()
            )));
        }
        let (logits, trace) = self.forward(batch)?;
        let loss = cross_entropy(&logits, labels)?;

        // d(mean CE)/d(logits) = (softmax - onehot) / batch
        let inv_b = 1.0 / batch.rows() as f64;
        let mut delta = softmax_rows(&logits);
        for (i, &y) in labels.iter().enumerate() {
            delta[(i, y)] -= 1.0;
        }
        delta.as_mut_slice().iter_mut().for_each(|x| *x *= inv_b);

        let mut grads = vec![None; self.weights.len()];
        for l in (0..self.weights.len()).rev() {
            let input = if l == 0 { batch } else { &trace.post[l - 1] };
            let mut g = input.t_matmul(&delta)?;
            if let Some(mask) = &self.masks[l] {
                mask.apply(&mut g);
            }
            grads[l] = Some(g);
            if l > 0 {
                let mut upstream = delta.matmul_t(&self.weights[l])?;
                for (d, &z) in upstream
                    .as_mut_slice()
                    .iter_mut()
                    .zip(trace.pre[l - 1].as_slice())
                {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        Ok((loss, grads.into_iter().map(Option::unwrap).collect()))
    }

    /// ON keeps only `cluster`'s output neurons of `layer`; OFF removes
    /// exactly those neurons.
    pub fn intervention(
        &self,
        layer: usize,
        cluster: usize,
        mode: InterventionMode,
    ) -> Result<Intervention> {
        let k = self.clustering_for_intervention(layer)?.k();
        if cluster >= k {
            return Err(Error::domain(format!(
                "cluster {cluster} out of range for k = {k}"
            )));
        }
        let clusters: Vec<usize> = match mode {
            InterventionMode::On => vec![cluster],
            InterventionMode::Off => (0..k).filter(|&c| c != cluster).collect(),
        };
        self.keep_clusters(layer, &clusters)
    }

    /// Keeps the output neurons of `layer` whose cluster id is listed in
    /// `clusters` and ablates the rest.
    pub fn keep_clusters(&self, layer: usize, clusters: &[usize]) -> Result<Intervention> {
        let clustering = self.clustering_for_intervention(layer)?;
        if let Some(&bad) = clusters.iter().find(|&&c| c >= clustering.k()) {
            return Err(Error::domain(format!(
                "cluster {bad} out of range for k = {}",
                clustering.k()
            )));
        }
        Ok(Intervention {
            layer,
            keep: clustering
                .col_assign()
                .iter()
                .map(|c| clusters.contains(c))
                .collect(),
        })
    }

    fn clustering_for_intervention(&self, layer: usize) -> Result<&BiClustering> {
        self.check_layer(layer)?;
        self.clustering(layer).ok_or_else(|| {
            Error::domain(format!(
                "layer {layer} has no clustering; interventions need one"
            ))
        })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::domain(format!(
            "a model needs at least input and output widths, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::domain(format!("layer widths must be positive, got {dims:?}")));
    }
    Ok(())
}

/// Mean over the batch of `-log softmax(logits)[label]`, evaluated with the
/// row maximum subtracted.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(per_sample_cross_entropy(logits, labels)?.iter().sum::<f64>() / labels.len() as f64)
}

pub fn per_sample_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if labels.len() != logits.rows() {
        return Err(Error::domain(format!(
            "{} labels for {} rows of logits",
            labels.len(),
            logits.rows()
        )));
    }
    let classes = logits.cols();
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= classes {
                return Err(Error::domain(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            let row = logits.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            Ok(lse - row[y])
        })
        .collect()
}

pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for z in row.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        row.iter_mut().for_each(|z| *z /= sum);
    }
    out
}

/// Index of each row's maximum; ties go to the lowest index.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::contiguous_clusters;

    #[test]
    fn init_shapes_and_determinism() {
        let m = MlpModel::init(&[784, 64, 64, 10], 0).unwrap();
        let shapes: Vec<_> = m.weights().iter().map(Matrix::shape).collect();
        assert_eq!(shapes, vec![(784, 64), (64, 64), (64, 10)]);
        assert_eq!(m, MlpModel::init(&[784, 64, 64, 10], 0).unwrap());
        assert_eq!(m.param_count(), 784 * 64 + 64 * 64 + 64 * 10);
    }

    #[test]
    fn init_variance_matches_he_scheme() {
        let m = MlpModel::init(&[784, 64, 10], 3).unwrap();
        let w = m.weight(0).as_slice();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
        let target = 2.0 / 784.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var} vs {target}");
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(MlpModel::init(&[5], 0).is_err());
        assert!(MlpModel::init(&[5, 0, 2], 0).is_err());
    }

    #[test]
    fn zero_input_gives_zero_logits() {
        let m = MlpModel::init(&[6, 5, 3], 1).unwrap();
        let logits = m.logits(&Matrix::zeros(4, 6)).unwrap();
        assert!(logits.as_slice().iter().all(|&x| x == 0.0));
        assert!(m.logits(&Matrix::zeros(4, 5)).is_err());
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let m = MlpModel::from_weights(vec![Matrix::identity(3)]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        assert_eq!(m.logits(&x).unwrap(), x);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Matrix::zeros(3, 10);
        let l = cross_entropy(&uniform, &[0, 4, 9]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);

        let mut confident = Matrix::zeros(1, 10);
        confident[(0, 2)] = 1000.0;
        let l = cross_entropy(&confident, &[2]).unwrap();
        assert!(l.is_finite() && l < 1e-6);

        assert!(cross_entropy(&uniform, &[0, 4, 10]).is_err());
    }

    #[test]
    fn zero_batch_gives_zero_gradients() {
        let m = MlpModel::init(&[4, 3, 2], 5).unwrap();
        let (_, grads) = m.backward(&Matrix::zeros(3, 4), &[0, 1, 1]).unwrap();
        assert!(grads.iter().all(|g| g.as_slice().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn dead_relu_paths_get_no_gradient() {
        // Hidden unit 1 has negative pre-activation for positive inputs.
        let w0 = Matrix::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let w1 = Matrix::from_rows(&[vec![0.5, -0.5], vec![0.3, 0.2]]).unwrap();
        let m = MlpModel::from_weights(vec![w0, w1]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 0.1]]).unwrap();
        let (_, g) = m.backward(&x, &[0, 1]).unwrap();
        assert_eq!(g[0].column(1), vec![0.0, 0.0]);
        assert_eq!(g[1].row(1), &[0.0, 0.0]);
    }

    #[test]
    fn masked_positions_have_zero_gradient_and_weight() {
        let mut m = MlpModel::init(&[3, 4, 2], 2).unwrap();
        let mut mask = WeightMask::all_active(3, 4);
        mask.set(1, 2, false);
        m.set_mask(0, Some(mask)).unwrap();
        assert_eq!(m.weight(0)[(1, 2)], 0.0);
        let x = Matrix::from_fn(5, 3, |i, j| (i + j) as f64 * 0.3);
        let (_, g) = m.backward(&x, &[0, 1, 0, 1, 1]).unwrap();
        assert_eq!(g[0][(1, 2)], 0.0);
    }

    #[test]
    fn interventions_need_a_clustering() {
        let m = MlpModel::init(&[4, 4, 2], 0).unwrap();
        assert!(apply_intervention(&m, 0, 0, InterventionMode::On).is_err());
    }

    #[test]
    fn single_cluster_on_is_plain_forward() {
        let mut m = MlpModel::init(&[5, 4, 4, 3], 9).unwrap();
        m.set_clustering(1, Some(BiClustering::single(4, 4))).unwrap();
        let x = Matrix::from_fn(6, 5, |i, j| ((i * 3 + j) % 4) as f64 * 0.25);
        let on = apply_intervention(&m, 1, 0, InterventionMode::On).unwrap();
        assert_eq!(on.forward(&x).unwrap().0, m.logits(&x).unwrap());
    }

    #[test]
    fn on_and_off_partition_the_activations() {
        let mut m = MlpModel::init(&[5, 8, 8, 3], 4).unwrap();
        m.set_clustering(1, Some(contiguous_clusters(8, 8, 4).unwrap())).unwrap();
        let x = Matrix::from_fn(3, 5, |i, j| (i as f64 - j as f64) * 0.4);
        let (_, plain) = m.forward(&x).unwrap();
        for c in 0..4 {
            let (_, on) = m.forward_with(&x, Some(&m.intervention(1, c, InterventionMode::On).unwrap())).unwrap();
            let (_, off) = m.forward_with(&x, Some(&m.intervention(1, c, InterventionMode::Off).unwrap())).unwrap();
            for ((a, b), p) in on.post[1].as_slice().iter().zip(off.post[1].as_slice()).zip(plain.post[1].as_slice()) {
                assert_eq!(a + b, *p);
            }
        }
        assert!(m.intervention(1, 4, InterventionMode::On).is_err());
    }
}
