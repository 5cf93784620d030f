mod common;

use clusterlab::clustering::contiguous_clusters;
use clusterlab::network::{
    apply_intervention, cross_entropy, load_checkpoint, save_checkpoint, AdamConfig, AdamState, Checkpoint,
    InterventionMode, WeightMask,
};
use clusterlab::{BiClustering, Error, Matrix, MlpModel};
use common::{max_abs_diff, random_matrix, rng};
use proptest::prelude::*;
use rand::Rng;

fn loss(model: &MlpModel, x: &Matrix, y: &[usize]) -> f64 {
    cross_entropy(&model.logits(x).unwrap(), y).unwrap()
}

#[test]
fn backward_matches_central_differences_across_twenty_seeds() {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut r = rng(seed);
        let model = MlpModel::init(&[6, 5, 4], seed).unwrap();
        let x = random_matrix(&mut r, 8, 6);
        let y: Vec<usize> = (0..8).map(|_| r.random_range(0..4)).collect();
        let (l, grads) = model.backward(&x, &y).unwrap();
        assert_eq!(l, loss(&model, &x, &y));
        for (layer, g) in grads.iter().enumerate() {
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let mut plus = model.clone();
                    let mut w = plus.weight(layer).clone();
                    w[(i, j)] += h;
                    plus.set_weight(layer, w).unwrap();
                    let mut minus = model.clone();
                    let mut w = minus.weight(layer).clone();
                    w[(i, j)] -= h;
                    minus.set_weight(layer, w).unwrap();
                    let fd = (loss(&plus, &x, &y) - loss(&minus, &x, &y)) / (2.0 * h);
                    let a = g[(i, j)];
                    worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
                }
            }
        }
    }
    assert!(worst < 1e-5, "max relative error {worst}");
}

#[test]
fn zero_input_and_dead_paths_have_zero_gradient() {
    let model = MlpModel::init(&[4, 3, 2], 1).unwrap();
    let x = Matrix::zeros(5, 4);
    let (_, grads) = model.backward(&x, &[0, 1, 0, 1, 1]).unwrap();
    assert!(grads.iter().all(|g| g.max_abs() == 0.0));

    // Hidden unit 0 never fires: its incoming weights are negative and the
    // inputs are non-negative.
    let mut w0 = model.weight(0).clone();
    for i in 0..4 {
        w0[(i, 0)] = -1.0;
    }
    let mut model = model;
    model.set_weight(0, w0).unwrap();
    let mut r = rng(2);
    let x = Matrix::from_fn(6, 4, |_, _| r.random_range(0.0..1.0));
    let (_, grads) = model.backward(&x, &[0, 1, 0, 1, 0, 1]).unwrap();
    for i in 0..4 {
        assert_eq!(grads[0][(i, 0)], 0.0);
    }
    for j in 0..2 {
        assert_eq!(grads[1][(0, j)], 0.0);
    }
}

/// −log softmax via Neumaier-compensated sums of exponentials shifted by
/// the true-class logit.
fn reference_ce(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut comp = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for &z in row {
            let t = (z - max).exp();
            let sum = s + t;
            c += if s.abs() >= t.abs() { (s - sum) + t } else { (t - sum) + s };
            s = sum;
        }
        let lse = max + (s + c).ln();
        let term = lse - row[y];
        let sum = total + term;
        comp += if total.abs() >= term.abs() { (total - sum) + term } else { (term - sum) + total };
        total = sum;
    }
    (total + comp) / labels.len() as f64
}

#[test]
fn cross_entropy_reference_values() {
    let uniform = Matrix::zeros(3, 10);
    assert!((cross_entropy(&uniform, &[0, 5, 9]).unwrap() - 10f64.ln()).abs() < 1e-15);
    let mut confident = Matrix::zeros(1, 3);
    confident[(0, 1)] = 1000.0;
    let l = cross_entropy(&confident, &[1]).unwrap();
    assert!(l.is_finite() && l < 1e-6);
    assert!(cross_entropy(&uniform, &[10]).is_err());

    let mut r = rng(3);
    for _ in 0..50 {
        let logits = Matrix::from_fn(16, 10, |_, _| r.random_range(-30.0..30.0));
        let labels: Vec<usize> = (0..16).map(|_| r.random_range(0..10)).collect();
        let a = cross_entropy(&logits, &labels).unwrap();
        let b = reference_ce(&logits, &labels);
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
    }
}

#[test]
fn forward_matches_an_independent_chain() {
    let mut r = rng(4);
    let model = MlpModel::init(&[7, 6, 5, 3], 4).unwrap();
    let x = random_matrix(&mut r, 9, 7);
    let logits = model.logits(&x).unwrap();
    for s in 0..9 {
        let mut h: Vec<f64> = x.row(s).to_vec();
        for (l, w) in model.weights().iter().enumerate() {
            let mut next = vec![0.0; w.cols()];
            for (j, out) in next.iter_mut().enumerate() {
                for (i, hi) in h.iter().enumerate() {
                    *out += hi * w[(i, j)];
                }
            }
            if l + 1 < model.n_layers() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        for (j, v) in h.iter().enumerate() {
            assert!((logits[(s, j)] - v).abs() < 1e-12);
        }
    }
    let (_, trace) = model.forward(&x).unwrap();
    assert!(trace.post.iter().all(|p| p.as_slice().iter().all(|&v| v >= 0.0)));
    assert!(model.logits(&Matrix::zeros(2, 7)).unwrap().max_abs() == 0.0);
    let id = MlpModel::from_weights(vec![Matrix::identity(3)]).unwrap();
    let x3 = random_matrix(&mut r, 2, 3);
    assert_eq!(id.logits(&x3).unwrap(), x3);
}

#[test]
fn he_initialization_shapes_and_variance() {
    let model = MlpModel::init(&[784, 64, 64, 10], 0).unwrap();
    let shapes: Vec<_> = model.weights().iter().map(Matrix::shape).collect();
    assert_eq!(shapes, vec![(784, 64), (64, 64), (64, 10)]);
    let w = model.weight(0).as_slice();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64;
    let target = 2.0 / 784.0;
    assert!((var - target).abs() <= 0.2 * target, "variance {var}");
    assert_eq!(MlpModel::init(&[784, 64, 64, 10], 0).unwrap(), model);
    assert!(MlpModel::init(&[5], 0).is_err());
    assert!(MlpModel::init(&[5, 0, 2], 0).is_err());
}

fn clustered_model(seed: u64) -> MlpModel {
    let mut model = MlpModel::init(&[8, 6, 6, 4], seed).unwrap();
    model.set_clustering(0, Some(contiguous_clusters(8, 6, 3).unwrap())).unwrap();
    model.set_clustering(1, Some(contiguous_clusters(6, 6, 2).unwrap())).unwrap();
    model
}

#[test]
fn on_and_off_activations_partition_the_plain_ones() {
    let model = clustered_model(5);
    let mut r = rng(5);
    let x = random_matrix(&mut r, 100, 8);
    let (_, plain) = model.forward(&x).unwrap();
    for layer in 0..2 {
        let k = model.clustering(layer).unwrap().k();
        for c in 0..k {
            let on = apply_intervention(&model, layer, c, InterventionMode::On).unwrap();
            let off = apply_intervention(&model, layer, c, InterventionMode::Off).unwrap();
            let (_, on_t) = on.forward(&x).unwrap();
            let (_, off_t) = off.forward(&x).unwrap();
            let sum = Matrix::new(
                100,
                6,
                on_t.post[layer].as_slice().iter().zip(off_t.post[layer].as_slice()).map(|(a, b)| a + b).collect(),
            )
            .unwrap();
            assert_eq!(sum, plain.post[layer]);
            // Exactly one of the two keeps each entry.
            for (a, b) in on_t.post[layer].as_slice().iter().zip(off_t.post[layer].as_slice()) {
                assert!(*a == 0.0 || *b == 0.0);
            }
        }
    }
}

#[test]
fn single_cluster_on_equals_plain_forward_bitwise() {
    let mut model = MlpModel::init(&[5, 4, 3], 6).unwrap();
    model.set_clustering(0, Some(BiClustering::single(5, 4))).unwrap();
    let mut r = rng(6);
    let x = random_matrix(&mut r, 20, 5);
    let on = apply_intervention(&model, 0, 0, InterventionMode::On).unwrap();
    assert_eq!(on.forward(&x).unwrap().0, model.logits(&x).unwrap());
}

#[test]
fn on_logits_ignore_weights_outside_the_cluster() {
    // Second layer block-diagonal with the clustering; under ON(c) only
    // cluster c neurons are live, so perturbing the outgoing weights of the
    // other neurons cannot change the logits.
    let mut model = clustered_model(7);
    let mut r = rng(7);
    let x = random_matrix(&mut r, 30, 8);
    let clustering = model.clustering(1).unwrap().clone();
    for c in 0..2 {
        let before = apply_intervention(&model, 1, c, InterventionMode::On).unwrap().forward(&x).unwrap().0;
        let mut perturbed = model.clone();
        let mut w2 = perturbed.weight(2).clone();
        for i in 0..6 {
            if clustering.col_assign()[i] != c {
                for j in 0..4 {
                    w2[(i, j)] += r.random_range(-5.0..5.0);
                }
            }
        }
        perturbed.set_weight(2, w2).unwrap();
        let after = apply_intervention(&perturbed, 1, c, InterventionMode::On).unwrap().forward(&x).unwrap().0;
        assert_eq!(before, after);
    }
    model.set_clustering(1, None).unwrap();
    assert!(apply_intervention(&model, 1, 0, InterventionMode::On).is_err());
    assert!(apply_intervention(&model, 0, 3, InterventionMode::On).is_err());
}

#[test]
fn masked_weights_survive_any_adam_sequence() {
    let mut model = MlpModel::init(&[5, 4, 3], 8).unwrap();
    let mut r = rng(8);
    for l in 0..2 {
        let (rows, cols) = model.weight(l).shape();
        let active = (0..rows * cols).map(|_| r.random_bool(0.6)).collect();
        model.set_mask(l, Some(WeightMask::from_active(rows, cols, active).unwrap())).unwrap();
    }
    let mut adam = AdamState::new(&model, AdamConfig::default());
    for _ in 0..50 {
        let x = random_matrix(&mut r, 6, 5);
        let y: Vec<usize> = (0..6).map(|_| r.random_range(0..3)).collect();
        let (_, mut grads) = model.backward(&x, &y).unwrap();
        // Even a gradient that ignores the mask leaves masked weights at 0.
        grads[0].as_mut_slice().iter_mut().for_each(|g| *g += 0.1);
        adam.step(&mut model, &grads).unwrap();
    }
    for l in 0..2 {
        let mask = model.mask(l).unwrap();
        let w = model.weight(l);
        for (on, x) in mask.as_slice().iter().zip(w.as_slice()) {
            if !on {
                assert_eq!(*x, 0.0);
            }
        }
    }
}

#[test]
fn checkpoint_file_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let model = clustered_model(9);
    save_checkpoint(&model, None, None, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let mut r = rng(9);
    let x = random_matrix(&mut r, 10, 8);
    assert_eq!(back.model.logits(&x).unwrap(), model.logits(&x).unwrap());
    assert_eq!(back.model, model);

    // Claimed column count disagrees with the payload.
    let text = std::fs::read_to_string(&path).unwrap();
    let corrupted = text.replacen("\"cols\":6", "\"cols\":7", 1);
    assert_ne!(corrupted, text);
    std::fs::write(&path, &corrupted).unwrap();
    match load_checkpoint(&path) {
        Err(Error::Format { location, .. }) => assert!(location.starts_with("layers["), "{location}"),
        other => panic!("expected a format error, got {other:?}"),
    }
    std::fs::write(&path, "{\"format_version\": 1, \"dims\": [").unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    assert!(matches!(load_checkpoint(&dir.path().join("missing.json")), Err(Error::Io { .. })));

    let json = Checkpoint::new(model.clone()).to_json();
    assert_eq!(Checkpoint::new(model).to_json(), json);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_preserves_weights_bitwise(seed in any::<u64>(), scale in -300i32..300) {
        let mut model = MlpModel::init(&[3, 4, 2], seed).unwrap();
        let w = model.weight(0).scale(10f64.powi(scale / 10));
        model.set_weight(0, w).unwrap();
        let back = Checkpoint::from_json(&Checkpoint::new(model.clone()).to_json(), "p.json".as_ref()).unwrap();
        for (a, b) in back.model.weights().iter().zip(model.weights()) {
            prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn interventions_reconstruct_for_random_models(seed in any::<u64>(), k in 1usize..4) {
        let mut model = MlpModel::init(&[5, 6, 3], seed).unwrap();
        model.set_clustering(0, Some(contiguous_clusters(5, 6, k).unwrap())).unwrap();
        let mut r = rng(seed);
        let x = random_matrix(&mut r, 12, 5);
        let (_, plain) = model.forward(&x).unwrap();
        for c in 0..k {
            let (_, on) = apply_intervention(&model, 0, c, InterventionMode::On).unwrap().forward(&x).unwrap();
            let (_, off) = apply_intervention(&model, 0, c, InterventionMode::Off).unwrap().forward(&x).unwrap();
            let mut sum = on.post[0].clone();
            sum.add_scaled(&off.post[0], 1.0).unwrap();
            prop_assert_eq!(max_abs_diff(&sum, &plain.post[0]), 0.0);
        }
    }
}
