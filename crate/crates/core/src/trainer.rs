//! Modular training.
//!
//! A run has three phases:
//!
//! 1. `warmup_steps` of plain cross-entropy training (optionally recording
//!    gradient traces),
//! 2. one-time selection of a clustering for every layer in
//!    `clustered_layers` (contiguous, weight-based BSGC, or gradient-based
//!    BSGC),
//! 3. the remaining steps minimize `CE + λ Σ_u (1 - C_u)` with the
//!    clusterings frozen.

use serde::{Deserialize, Serialize};

use crate::clustering::{bsgc_floored, contiguous_clusters, gradient_similarity, weight_similarity, GradTrace};
use crate::datahub::{batches, Dataset};
use crate::error::{Error, Result};
use crate::modmetrics::{clusterability, clusterability_grad};
use crate::network::{argmax_rows, per_sample_cross_entropy, AdamConfig, AdamState, MlpModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusteringSource {
    Contiguous,
    BsgcWeight,
    BsgcGradient,
}

/// Every hyperparameter of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub dims: Vec<usize>,
    pub warmup_steps: usize,
    pub lambda: f64,
    pub k: usize,
    /// Weight-layer indices that receive a clustering and the penalty;
    /// `None` means every layer except the output layer.
    pub clustered_layers: Option<Vec<usize>>,
    pub clustering_source: ClusteringSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Permit clustering the output layer.
    pub allow_output_layer: bool,
    /// Record gradient traces for every step of the run, not just warmup.
    pub record_grad_trace: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            dims: vec![784, 64, 64, 10],
            warmup_steps: 0,
            lambda: 20.0,
            k: 4,
            clustered_layers: None,
            clustering_source: ClusteringSource::Contiguous,
            epochs: 5,
            batch_size: 64,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            seed: 0,
            eval_every: 50,
            allow_output_layer: false,
            record_grad_trace: false,
        }
    }
}

impl TrainPlan {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// The clustered layers with the default resolved.
    pub fn layers(&self) -> Vec<usize> {
        match &self.clustered_layers {
            Some(ls) => ls.clone(),
            None => (0..self.dims.len().saturating_sub(2)).collect(),
        }
    }

    /// Checks the plan; error messages start with the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::domain(format!("{field}: {msg}")));
        if self.dims.len() < 2 || self.dims.contains(&0) {
            return bad("dims", format!("need at least two positive widths, got {:?}", self.dims));
        }
        if self.k == 0 {
            return bad("k", "must be at least 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda", format!("must be finite and non-negative, got {}", self.lambda));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1/beta2", "must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps", "must be positive".into());
        }
        let n_layers = self.dims.len() - 1;
        let clusterable = if self.allow_output_layer { n_layers } else { n_layers - 1 };
        let mut seen = Vec::new();
        for l in self.layers() {
            if l >= clusterable {
                return bad(
                    "clustered_layers",
                    format!(
                        "layer {l} is not a clusterable layer (valid: 0..{clusterable}{})",
                        if self.allow_output_layer { "" } else { "; the output layer needs allow_output_layer" }
                    ),
                );
            }
            if seen.contains(&l) {
                return bad("clustered_layers", format!("layer {l} listed twice"));
            }
            seen.push(l);
            let width = self.dims[l].min(self.dims[l + 1]);
            if self.k > width {
                return bad("k", format!("{} exceeds layer {l}'s smallest side ({width})", self.k));
            }
        }
        if self.clustering_source == ClusteringSource::BsgcGradient
            && self.warmup_steps == 0
            && !self.layers().is_empty()
        {
            return bad(
                "warmup_steps",
                "gradient-based clustering needs warmup steps to record a trace".into(),
            );
        }
        Ok(())
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Completed optimizer steps.
    pub step: usize,
    /// Mean cross-entropy over the training set.
    pub ce_loss: f64,
    /// `ce_loss + λ Σ (1 - C_u)` (equal to `ce_loss` during warmup).
    pub eff_loss: f64,
    /// Clusterability of each clustered layer; `None` before clusterings
    /// are selected.
    pub clusterability: Vec<Option<f64>>,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub clustered_layers: Vec<usize>,
    pub lambda: f64,
    pub records: Vec<EvalRecord>,
}

/// Accuracy summary of a model on a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// Accuracy per class; `None` for classes with no samples.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_counts: Vec<usize>,
    pub correct: usize,
}

const EVAL_CHUNK: usize = 1024;

/// Predictions and per-sample losses over a whole dataset, in chunks.
pub(crate) fn predict_dataset(
    model: &MlpModel,
    data: &Dataset,
    forward: &dyn Fn(&crate::numerics::Matrix) -> Result<crate::numerics::Matrix>,
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut losses = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk);
        let logits = forward(&x)?;
        preds.extend(argmax_rows(&logits));
        losses.extend(per_sample_cross_entropy(&logits, &y)?);
    }
    debug_assert_eq!(model.n_classes(), data.n_classes().max(model.n_classes()));
    Ok((preds, losses))
}

pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::domain("cannot evaluate on an empty dataset"));
    }
    if data.n_classes() > model.n_classes() {
        return Err(Error::domain(format!(
            "dataset has {} classes but the model outputs {}",
            data.n_classes(),
            model.n_classes()
        )));
    }
    let (preds, losses) = predict_dataset(model, data, &|x| model.logits(x))?;
    Ok(summarize(&preds, &losses, data.labels(), model.n_classes()))
}

pub(crate) fn summarize(preds: &[usize], losses: &[f64], labels: &[usize], n_classes: usize) -> Evaluation {
    let mut counts = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        counts[y] += 1;
        if p == y {
            hits[y] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
        per_class_accuracy: hits
            .iter()
            .zip(&counts)
            .map(|(&h, &c)| (c > 0).then(|| h as f64 / c as f64))
            .collect(),
        per_class_counts: counts,
        correct,
    }
}

/// A training run that can be advanced one optimizer step at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    plan: TrainPlan,
    model: MlpModel,
    adam: AdamState,
    step: usize,
    selected: bool,
    traces: Vec<Option<GradTrace>>,
    history: TrainHistory,
    epoch_batches: Option<(usize, Vec<Vec<usize>>)>,
}

impl Trainer {
    /// Fresh model initialized from `plan.seed`.
    pub fn new(plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        let model = MlpModel::init(&plan.dims, plan.seed)?;
        let plan = TrainPlan {
            clustered_layers: Some(plan.layers()),
            ..plan
        };
        Ok(Self::assemble(plan, model, false))
    }

    /// Continues training an existing model. Clusterings the model already
    /// carries for the plan's layers are kept; missing ones are selected
    /// from `plan.clustering_source` before the first step.
    pub fn from_model(mut plan: TrainPlan, model: MlpModel) -> Result<Self> {
        plan.dims = model.dims().to_vec();
        plan.validate()?;
        plan.clustered_layers = Some(plan.layers());
        let preset = plan
            .layers()
            .iter()
            .all(|&l| model.clustering(l).is_some());
        if !preset {
            plan.warmup_steps = 0;
            if plan.clustering_source == ClusteringSource::BsgcGradient {
                return Err(Error::domain(
                    "clustering_source: gradient-based clustering of an existing model needs a recorded trace",
                ));
            }
        }
        Ok(Self::assemble(plan, model, preset))
    }

    fn assemble(plan: TrainPlan, model: MlpModel, selected: bool) -> Self {
        let tracing = plan.record_grad_trace
            || (plan.clustering_source == ClusteringSource::BsgcGradient && plan.warmup_steps > 0);
        let hidden = model.n_layers();
        let traces = (0..hidden)
            .map(|l| {
                let w = model.weight(l);
                (tracing && (l + 1 < hidden || plan.allow_output_layer))
                    .then(|| GradTrace::new(w.rows(), w.cols()))
            })
            .collect();
        Self {
            adam: AdamState::new(&model, plan.adam()),
            history: TrainHistory {
                clustered_layers: plan.layers(),
                lambda: plan.lambda,
                records: Vec::new(),
            },
            plan,
            model,
            step: 0,
            selected,
            traces,
            epoch_batches: None,
        }
    }

    pub fn plan(&self) -> &TrainPlan {
        &self.plan
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn traces(&self) -> &[Option<GradTrace>] {
        &self.traces
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn steps_per_epoch(&self, train: &Dataset) -> usize {
        train.len().div_ceil(self.plan.batch_size)
    }

    pub fn total_steps(&self, train: &Dataset) -> usize {
        self.plan.epochs * self.steps_per_epoch(train)
    }

    pub fn into_parts(self) -> (MlpModel, TrainHistory, Vec<Option<GradTrace>>) {
        (self.model, self.history, self.traces)
    }

    fn check_data(&self, train: &Dataset, test: &Dataset) -> Result<()> {
        if train.is_empty() || test.is_empty() {
            return Err(Error::domain("training and test sets must be non-empty"));
        }
        for (name, d) in [("training", train), ("test", test)] {
            if d.dim() != self.plan.dims[0] {
                return Err(Error::domain(format!(
                    "dims: the {name} set has {} features but dims[0] = {}",
                    d.dim(),
                    self.plan.dims[0]
                )));
            }
            if d.n_classes() > self.model.n_classes() {
                return Err(Error::domain(format!(
                    "dims: the {name} set has {} classes but the model outputs {}",
                    d.n_classes(),
                    self.model.n_classes()
                )));
            }
        }
        Ok(())
    }

    /// Runs every remaining step of the plan, evaluating every
    /// `eval_every` steps and at the end.
    pub fn run(&mut self, train: &Dataset, test: &Dataset) -> Result<()> {
        self.check_data(train, test)?;
        let total = self.total_steps(train);
        if self.history.records.is_empty() {
            self.maybe_select()?;
            self.record_eval(train, test)?;
        }
        while self.step < total {
            self.step(train)?;
            if self.step.is_multiple_of(self.plan.eval_every) || self.step == total {
                self.record_eval(train, test)?;
            }
        }
        Ok(())
    }

    fn maybe_select(&mut self) -> Result<()> {
        if self.selected || self.step < self.plan.warmup_steps {
            return Ok(());
        }
        for l in self.plan.layers() {
            if self.model.clustering(l).is_some() {
                continue;
            }
            let w = self.model.weight(l);
            let clustering = match self.plan.clustering_source {
                ClusteringSource::Contiguous => contiguous_clusters(w.rows(), w.cols(), self.plan.k)?,
                ClusteringSource::BsgcWeight => bsgc_floored(&weight_similarity(w), self.plan.k, self.plan.seed)?,
                ClusteringSource::BsgcGradient => {
                    let trace = self.traces[l].as_ref().ok_or_else(|| {
                        Error::domain(format!("no gradient trace recorded for layer {l}"))
                    })?;
                    bsgc_floored(&gradient_similarity(trace)?, self.plan.k, self.plan.seed)?
                }
            };
            self.model.set_clustering(l, Some(clustering))?;
        }
        self.selected = true;
        Ok(())
    }

    /// One optimizer step on the next minibatch.
    pub fn step(&mut self, train: &Dataset) -> Result<()> {
        self.maybe_select()?;
        let per_epoch = self.steps_per_epoch(train);
        let epoch = self.step / per_epoch;
        if self.epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let b = batches(train.len(), self.plan.batch_size, epoch as u64, self.plan.seed)?;
            self.epoch_batches = Some((epoch, b));
        }
        let indices = &self.epoch_batches.as_ref().unwrap().1[self.step % per_epoch];
        let (x, y) = train.batch(indices);
        let (_, mut grads) = self.model.backward(&x, &y)?;

        let tracing = self.plan.record_grad_trace || !self.selected;
        if tracing {
            for (trace, g) in self.traces.iter_mut().zip(&grads) {
                if let Some(t) = trace {
                    t.record(g)?;
                }
            }
        }
        if self.selected && self.plan.lambda > 0.0 {
            for l in self.plan.layers() {
                let clustering = self.model.clustering(l).expect("selected");
                let reg = clusterability_grad(self.model.weight(l), clustering)?;
                grads[l].add_scaled(&reg, self.plan.lambda)?;
            }
        }
        self.adam.step(&mut self.model, &grads)?;
        self.step += 1;
        Ok(())
    }

    /// Clusterability of each clustered layer, `None` before selection.
    pub fn clusterabilities(&self) -> Result<Vec<Option<f64>>> {
        self.plan
            .layers()
            .into_iter()
            .map(|l| match self.model.clustering(l) {
                Some(c) => clusterability(self.model.weight(l), c).map(|s| Some(s.c)),
                None => Ok(None),
            })
            .collect()
    }

    fn record_eval(&mut self, train: &Dataset, test: &Dataset) -> Result<()> {
        let tr = evaluate(&self.model, train)?;
        let te = evaluate(&self.model, test)?;
        let clusterability = self.clusterabilities()?;
        let eff_loss = if self.selected {
            tr.mean_loss + self.plan.lambda * clusterability.iter().map(|c| 1.0 - c.unwrap()).sum::<f64>()
        } else {
            tr.mean_loss
        };
        self.history.records.push(EvalRecord {
            step: self.step,
            ce_loss: tr.mean_loss,
            eff_loss,
            clusterability,
            train_acc: tr.accuracy,
            test_acc: te.accuracy,
        });
        Ok(())
    }
}

/// Result of a complete run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: TrainHistory,
    pub traces: Vec<Option<GradTrace>>,
}

/// Trains a fresh model according to `plan`.
pub fn train(plan: &TrainPlan, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(plan.clone())?;
    trainer.run(train, test)?;
    let (model, history, traces) = trainer.into_parts();
    Ok(TrainOutcome { model, history, traces })
}

/// Stopping rules for [`max_clusterability_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Largest tolerated absolute drop in test accuracy.
    pub accuracy_tolerance: f64,
    /// Evaluations without sufficient improvement before stopping.
    pub plateau_evals: usize,
    /// Smallest increase in C that counts as improvement.
    pub min_improvement: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            accuracy_tolerance: 0.01,
            plateau_evals: 3,
            min_improvement: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub layer: usize,
    pub initial_c: f64,
    pub max_c: f64,
    pub baseline_test_acc: f64,
    pub steps: usize,
    /// `(step, C, test accuracy)` at every evaluation.
    pub trace: Vec<(usize, f64, f64)>,
}

/// Trains `model` further with the penalty on `layer` alone and returns the
/// highest clusterability reached while test accuracy stays within the
/// tolerance of the starting accuracy. Stops when accuracy degrades, when C
/// plateaus, or after `plan.epochs` epochs.
pub fn max_clusterability_sweep(
    model: &MlpModel,
    layer: usize,
    plan: &TrainPlan,
    config: &SweepConfig,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<SweepResult> {
    let mut model = model.clone();
    let mut plan = plan.clone();
    plan.clustered_layers = Some(vec![layer]);
    plan.warmup_steps = 0;
    plan.record_grad_trace = false;
    if model.clustering(layer).is_none() {
        plan.clustering_source = match plan.clustering_source {
            ClusteringSource::BsgcGradient => ClusteringSource::Contiguous,
            s => s,
        };
    }
    // Keep only the swept layer's clustering so no other layer is penalized.
    let keep = model.clustering(layer).cloned();
    for l in 0..model.n_layers() {
        model.set_clustering(l, None)?;
    }
    model.set_clustering(layer, keep)?;

    let mut trainer = Trainer::from_model(plan.clone(), model)?;
    trainer.check_data(train_set, test_set)?;
    trainer.maybe_select()?;
    let c_now = |t: &Trainer| -> Result<f64> { Ok(t.clusterabilities()?[0].expect("selected")) };

    let baseline = evaluate(trainer.model(), test_set)?.accuracy;
    let initial_c = c_now(&trainer)?;
    let mut result = SweepResult {
        layer,
        initial_c,
        max_c: initial_c,
        baseline_test_acc: baseline,
        steps: 0,
        trace: vec![(0, initial_c, baseline)],
    };
    if plan.lambda == 0.0 || initial_c >= 1.0 {
        return Ok(result);
    }

    let total = trainer.total_steps(train_set);
    let mut best_seen = initial_c;
    let mut stale = 0;
    while trainer.steps_done() < total {
        trainer.step(train_set)?;
        let step = trainer.steps_done();
        if step % plan.eval_every != 0 && step != total {
            continue;
        }
        let c = c_now(&trainer)?;
        let acc = evaluate(trainer.model(), test_set)?.accuracy;
        result.trace.push((step, c, acc));
        result.steps = step;
        if acc < baseline - config.accuracy_tolerance {
            break;
        }
        result.max_c = result.max_c.max(c);
        if c > best_seen + config.min_improvement {
            best_seen = c;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.plateau_evals {
                break;
            }
        }
    }
    Ok(result)
}
