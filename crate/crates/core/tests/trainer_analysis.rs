mod common;

use clusterlab::analysis::{
    compare_reports, ecs_compare, effective_circuit, effective_circuits, intervention_matrix, null_dependency,
    sufficiency_histogram, EcsConfig,
};
use clusterlab::datahub::SyntheticSpec;
use clusterlab::network::{argmax_rows, per_sample_cross_entropy, Checkpoint, InterventionMode};
use clusterlab::trainer::{evaluate, max_clusterability_sweep, SweepConfig, Trainer};
use clusterlab::{train, ClusteringSource, Dataset, Matrix, MlpModel, Split, TrainPlan};
use common::brute_force_c;

fn task(seed: u64) -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        n_classes: 4,
        dim: 20,
        per_class: 60,
        seed,
    };
    (spec.generate(Split::Train).unwrap(), spec.generate(Split::Test).unwrap())
}

fn plan(lambda: f64) -> TrainPlan {
    TrainPlan {
        dims: vec![20, 16, 16, 4],
        lambda,
        k: 2,
        epochs: 15,
        batch_size: 16,
        eval_every: 10,
        lr: 1e-2,
        seed: 3,
        ..TrainPlan::default()
    }
}

#[test]
fn identical_plans_give_identical_runs() {
    let (tr, te) = task(1);
    let a = train(&plan(20.0), &tr, &te).unwrap();
    let b = train(&plan(20.0), &tr, &te).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model, b.model);
    let ja = Checkpoint { history: Some(a.history.clone()), ..Checkpoint::new(a.model.clone()) }.to_json();
    let jb = Checkpoint { history: Some(b.history), ..Checkpoint::new(b.model) }.to_json();
    assert_eq!(ja, jb);

    let other = train(&TrainPlan { seed: 4, ..plan(20.0) }, &tr, &te).unwrap();
    assert_ne!(other.model.weights(), a.model.weights());
}

#[test]
fn history_records_match_independent_recomputation() {
    let (tr, te) = task(2);
    let p = plan(20.0);
    let out = train(&p, &tr, &te).unwrap();
    let per_epoch = tr.len().div_ceil(p.batch_size);
    let total = per_epoch * p.epochs;
    let steps: Vec<usize> = out.history.records.iter().map(|r| r.step).collect();
    let mut expected: Vec<usize> = (0..=total).step_by(p.eval_every).collect();
    if *expected.last().unwrap() != total {
        expected.push(total);
    }
    assert_eq!(steps, expected);

    let last = out.history.records.last().unwrap();
    let logits = out.model.logits(tr.features()).unwrap();
    let losses = per_sample_cross_entropy(&logits, tr.labels()).unwrap();
    let ce = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((last.ce_loss - ce).abs() < 1e-12);
    let correct = argmax_rows(&logits).iter().zip(tr.labels()).filter(|(p, y)| p == y).count();
    assert_eq!(last.train_acc, correct as f64 / tr.len() as f64);

    let mut penalty = 0.0;
    for (slot, &l) in out.history.clustered_layers.iter().enumerate() {
        let c = out.model.clustering(l).unwrap();
        let oracle = brute_force_c(out.model.weight(l), c.row_assign(), c.col_assign());
        assert!((last.clusterability[slot].unwrap() - oracle).abs() < 1e-12);
        penalty += 1.0 - oracle;
    }
    assert!((last.eff_loss - (ce + 20.0 * penalty)).abs() < 1e-9);
}

#[test]
fn the_penalty_drives_clusterability_up() {
    let (tr, te) = task(3);
    let with = train(&plan(20.0), &tr, &te).unwrap();
    let without = train(&plan(0.0), &tr, &te).unwrap();
    let c_with = &with.history.records.last().unwrap().clusterability;
    let c_without = &without.history.records.last().unwrap().clusterability;
    for (a, b) in c_with.iter().zip(c_without) {
        assert!(a.unwrap() > 0.95, "clustered C = {a:?}");
        assert!(a.unwrap() > b.unwrap());
    }
    let acc = with.history.records.last().unwrap().test_acc;
    assert!(acc > 0.9, "test accuracy {acc} vs {}", without.history.records.last().unwrap().test_acc);
}

#[test]
fn clusterings_freeze_after_warmup() {
    let (tr, te) = task(4);
    let p = TrainPlan {
        warmup_steps: 7,
        clustering_source: ClusteringSource::BsgcGradient,
        ..plan(20.0)
    };
    let mut t = Trainer::new(p).unwrap();
    for _ in 0..7 {
        t.step(&tr).unwrap();
        assert!(t.model().clustering(0).is_none());
    }
    assert!(t.traces()[0].as_ref().is_some_and(|tr| tr.step_count() == 7));
    t.step(&tr).unwrap();
    let selected: Vec<_> = (0..2).map(|l| t.model().clustering(l).cloned().unwrap()).collect();
    t.run(&tr, &te).unwrap();
    for (l, c) in selected.iter().enumerate() {
        assert_eq!(t.model().clustering(l), Some(c));
    }
    // Traces stop growing once the clusterings are fixed.
    assert_eq!(t.traces()[0].as_ref().unwrap().step_count(), 7);
}

#[test]
fn sweep_reports_the_best_clusterability_within_tolerance() {
    let (tr, te) = task(5);
    let base = train(&plan(0.0), &tr, &te).unwrap();
    let sweep_plan = TrainPlan { epochs: 3, eval_every: 5, ..plan(20.0) };
    let cfg = SweepConfig::default();
    let res = max_clusterability_sweep(&base.model, 1, &sweep_plan, &cfg, &tr, &te).unwrap();
    assert!(res.max_c >= res.initial_c);
    assert!(res.trace.windows(2).all(|w| w[0].0 < w[1].0));
    let admissible = res
        .trace
        .iter()
        .filter(|t| t.2 >= res.baseline_test_acc - cfg.accuracy_tolerance)
        .map(|t| t.1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(res.max_c, admissible);
    assert_eq!(res.baseline_test_acc, evaluate(&base.model, &te).unwrap().accuracy);
}

/// The trained model widened with a second, disconnected copy of the first
/// hidden layer: same incoming weights, zero outgoing weights.
fn with_dead_copy(model: &MlpModel) -> MlpModel {
    let w0 = model.weight(0);
    let w1 = model.weight(1);
    let h = w0.cols();
    let wide0 = Matrix::from_fn(w0.rows(), 2 * h, |i, j| w0[(i, j % h)]);
    let wide1 = Matrix::from_fn(2 * h, w1.cols(), |i, j| if i < h { w1[(i, j)] } else { 0.0 });
    MlpModel::from_weights(vec![wide0, wide1]).unwrap()
}

fn one_hidden_model() -> (MlpModel, Dataset) {
    let (tr, te) = task(6);
    let p = TrainPlan { dims: vec![20, 8, 4], lambda: 0.0, ..plan(0.0) };
    (train(&p, &tr, &te).unwrap().model, te)
}

#[test]
fn pruned_circuits_satisfy_their_gate() {
    let (model, data) = one_hidden_model();
    let cfg = EcsConfig::default();
    for report in effective_circuits(&model, &data, &cfg).unwrap() {
        let circuit = effective_circuit(&model, &data, report.label, &cfg).unwrap();
        assert_eq!(circuit.report, report);
        let idx = data.class_indices(report.label);
        let (x, y) = data.batch(&idx);
        let logits = circuit.model.logits(&x).unwrap();
        let acc = argmax_rows(&logits).iter().filter(|&&p| p == report.label).count() as f64 / idx.len() as f64;
        let loss = per_sample_cross_entropy(&logits, &y).unwrap().iter().sum::<f64>() / idx.len() as f64;
        assert_eq!(acc, report.final_accuracy);
        assert!(acc >= report.baseline_accuracy - cfg.accuracy_drop);
        assert!(loss <= report.baseline_loss * (1.0 + cfg.loss_rise) + 1e-12);
        assert_eq!(circuit.model.nonzero_count(), report.nonzero);
        assert_eq!(report.total, model.param_count());
        assert!(report.ecs > 0.0 && report.ecs < 1.0);
        assert_eq!(report.passes.last().unwrap().removed, 0);
    }
}

#[test]
fn a_disconnected_copy_is_pruned_away_entirely() {
    let (model, data) = one_hidden_model();
    let wide = with_dead_copy(&model);
    let mut rng = common::rng(6);
    let x = common::random_matrix(&mut rng, 10, 20);
    assert_eq!(wide.logits(&x).unwrap(), model.logits(&x).unwrap());

    // One weight per trial, so the live part is pruned in the same order
    // and with the same outcomes in both networks.
    let cfg = EcsConfig { chunk_fraction: 1e-9, ..EcsConfig::default() };
    for label in 0..4 {
        let narrow = effective_circuit(&model, &data, label, &cfg).unwrap().report;
        let doubled = effective_circuit(&wide, &data, label, &cfg).unwrap().report;
        assert_eq!(doubled.nonzero, narrow.nonzero);
        assert!(doubled.ecs <= 0.5 * narrow.ecs + 1e-15);
    }
    let cmp = ecs_compare(&wide, &model, &data, &cfg).unwrap();
    assert!((cmp.mean_pct_increase - 100.0).abs() < 1e-9, "{}", cmp.mean_pct_increase);
    let direct = compare_reports(
        &effective_circuits(&wide, &data, &cfg).unwrap(),
        &effective_circuits(&model, &data, &cfg).unwrap(),
    )
    .unwrap();
    assert_eq!(direct, cmp);
}

#[test]
fn intervention_summaries_are_consistent() {
    let (tr, te) = task(7);
    let out = train(&TrainPlan { k: 4, ..plan(20.0) }, &tr, &te).unwrap();
    let model = out.model;
    for layer in 0..2 {
        let h = sufficiency_histogram(&model, layer, &te).unwrap();
        assert_eq!(h.counts.len(), 5);
        assert_eq!(h.counts.iter().sum::<usize>(), h.eligible_count);
        assert!(((0..=4).map(|s| h.fraction(s)).sum::<f64>() - 1.0).abs() < 1e-12);
        let all_on = null_dependency(&model, layer, &te, 4).unwrap();
        assert_eq!(all_on.unsolved, 0);
        assert_eq!(all_on.eligible_count, h.eligible_count);
        for m in 1..=4 {
            let nd = null_dependency(&model, layer, &te, m).unwrap();
            assert!((0.0..=1.0).contains(&nd.fraction));
        }
        let off = intervention_matrix(&model, layer, InterventionMode::Off, &te).unwrap();
        assert_eq!(off.k(), 4);
        assert!(off.accuracy.iter().flatten().all(|a| a.is_some_and(|v| (0.0..=1.0).contains(&v))));
    }
}
