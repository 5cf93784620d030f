use std::path::Path;

use clusterlab::datahub::{
    batches, load_idx, load_mnist_dir, parse_idx, SyntheticSpec, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use clusterlab::theory::{
    jl_capacity, modular_capacity_comparison, polytope_bound_dense, polytope_pair_count_dense,
    polytope_pair_count_fully_modular, polytope_pair_count_modular, BigCount, ModularPartition,
};
use clusterlab::{Error, Split};
use num_bigint::BigUint;
use proptest::prelude::*;

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn dense_bound_reference_values() {
    let b = polytope_bound_dense(&[64, 64]).unwrap();
    assert_eq!(b.to_decimal(), "340282366920938463463374607431768211456");
    assert_eq!(b.log2(), 128.0);
    assert!((b.ln() - 128.0 * std::f64::consts::LN_2).abs() < 1e-12);
    assert_eq!(polytope_pair_count_dense(784, 64).unwrap(), BigCount::pow2(848));
    assert!(polytope_bound_dense(&[]).is_err());
    assert!(polytope_bound_dense(&[3, 0]).is_err());
}

#[test]
fn dense_bound_is_monotone_in_every_width() {
    for a in 1..6 {
        for b in 1..6 {
            let base = polytope_bound_dense(&[a, b]).unwrap();
            assert!(polytope_bound_dense(&[a + 1, b]).unwrap().value() > base.value());
            assert!(polytope_bound_dense(&[a, b + 1]).unwrap().value() > base.value());
            assert_eq!(base.value(), &(BigUint::from(1u8) << (a + b)));
        }
    }
}

#[test]
fn modular_pair_count_closed_forms() {
    // Equal split of 64 outputs into 4 modules: 4 · 2^{64 + 16}.
    let p = ModularPartition::equal(64, 4).unwrap();
    let m = polytope_pair_count_modular(64, &p).unwrap();
    assert_eq!(m.value(), &(BigUint::from(4u8) << 80));
    assert_eq!(m.log2(), 82.0);
    let d = polytope_pair_count_dense(64, 64).unwrap();
    assert!(m.value() < d.value());

    let p1 = ModularPartition::equal(64, 1).unwrap();
    assert_eq!(polytope_pair_count_modular(64, &p1).unwrap(), d);

    let fm = ModularPartition::with_inputs(vec![3, 5], vec![2, 4]).unwrap();
    assert_eq!(polytope_pair_count_fully_modular(&fm).unwrap().value(), &BigUint::from(32u32 + 512));
}

#[test]
fn jl_capacity_sits_on_the_boundary() {
    // n·eps²/8 = 2, so m is the largest integer below e² ≈ 7.389.
    assert_eq!(jl_capacity(64, 0.5).unwrap(), 7);
    for n in [1usize, 8, 50, 64, 200, 784, 3000] {
        for eps in [0.05, 0.1, 0.3, 0.5, 0.9] {
            let bound = n as f64 * eps * eps / 8.0;
            if bound >= 88.0 {
                assert!(jl_capacity(n, eps).is_err());
                continue;
            }
            let m = jl_capacity(n, eps).unwrap();
            assert!(m >= 1);
            assert!(m == 1 || (m as f64).ln() < bound, "n={n} eps={eps} m={m}");
            assert!(((m + 1) as f64).ln() >= bound, "n={n} eps={eps} m={m}");
        }
    }
    assert!(jl_capacity(10, 0.0).is_err());
    assert!(jl_capacity(10, 1.0).is_err());
    assert!(jl_capacity(0, 0.5).is_err());
    assert!(jl_capacity(1_000_000, 0.9).is_err());
}

#[test]
fn capacity_gap_is_positive_for_real_splits() {
    let one = modular_capacity_comparison(&[64]).unwrap();
    assert!(one.gap().abs() < 1e-12);
    let four = modular_capacity_comparison(&[16, 16, 16, 16]).unwrap();
    assert!((four.modular_log - (16.0 + 4f64.ln())).abs() < 1e-12);
    assert_eq!(four.dense_log, 64.0);
    assert!(four.gap() > 0.0);
    assert!(modular_capacity_comparison(&[]).is_err());
}

proptest! {
    #[test]
    fn modular_never_exceeds_dense(n_prev in 1usize..40, parts in prop::collection::vec(1usize..20, 1..6)) {
        let width: usize = parts.iter().sum();
        let p = ModularPartition::new(parts.clone()).unwrap();
        let m = polytope_pair_count_modular(n_prev, &p).unwrap();
        let d = polytope_pair_count_dense(n_prev, width).unwrap();
        prop_assert!(m.value() <= d.value());
        prop_assert_eq!(m.value() == d.value(), parts.len() == 1);
        let cmp = modular_capacity_comparison(&parts).unwrap();
        prop_assert_eq!(cmp.gap() > 1e-12, parts.len() > 1);
    }

    #[test]
    fn log2_matches_float_on_small_values(v in 1u64..u64::MAX) {
        let b = BigCount::new(BigUint::from(v));
        prop_assert!((b.log2() - (v as f64).log2()).abs() < 1e-12 * (v as f64).log2().max(1.0));
        prop_assert_eq!(b.to_decimal(), v.to_string());
    }
}

fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut v = Vec::new();
    for w in [IDX_IMAGES_MAGIC, n, rows, cols] {
        v.extend_from_slice(&w.to_be_bytes());
    }
    v.extend_from_slice(pixels);
    v
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut v = Vec::new();
    for w in [IDX_LABELS_MAGIC, labels.len() as u32] {
        v.extend_from_slice(&w.to_be_bytes());
    }
    v.extend_from_slice(labels);
    v
}

fn format_error(result: clusterlab::Result<clusterlab::Dataset>) -> (String, String) {
    match result {
        Err(Error::Format { location, message, .. }) => (location, message),
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn idx_files_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 2 * 2).map(|i| [0u8, 255, 51][i % 3]).collect();
    std::fs::write(dir.path().join("img"), idx_images(3, 2, 2, &pixels)).unwrap();
    std::fs::write(dir.path().join("lbl"), idx_labels(&[7, 0, 3])).unwrap();
    let d = load_idx(&dir.path().join("img"), &dir.path().join("lbl")).unwrap();
    assert_eq!((d.len(), d.dim(), d.n_classes()), (3, 4, 10));
    assert_eq!(d.labels(), &[7, 0, 3]);
    assert_eq!(d.features().row(0), &[0.0, 1.0, 0.2, 0.0]);

    for (name, content) in [
        ("train-images-idx3-ubyte", idx_images(3, 2, 2, &pixels)),
        ("train-labels-idx1-ubyte", idx_labels(&[1, 2, 3])),
        ("t10k-images-idx3-ubyte", idx_images(1, 2, 2, &[255; 4])),
        ("t10k-labels-idx1-ubyte", idx_labels(&[4])),
    ] {
        std::fs::write(dir.path().join(name), content).unwrap();
    }
    let (tr, te) = load_mnist_dir(dir.path()).unwrap();
    assert_eq!((tr.split(), te.split()), (Split::Train, Split::Test));
    assert_eq!(te.features().row(0), &[1.0; 4]);
}

#[test]
fn malformed_idx_files_are_reported() {
    let p = Path::new("x");
    let good_img = idx_images(2, 1, 2, &[1, 2, 3, 4]);
    let good_lbl = idx_labels(&[0, 1]);

    let mut bad_magic = good_img.clone();
    bad_magic[3] = 0x01;
    assert_eq!(format_error(parse_idx(&bad_magic, &good_lbl, p, p)).0, "magic");

    let truncated = &good_img[..good_img.len() - 1];
    let (loc, msg) = format_error(parse_idx(truncated, &good_lbl, p, p));
    assert_eq!(loc, "payload");
    assert!(msg.contains("19 bytes"), "{msg}");

    let (loc, msg) = format_error(parse_idx(&good_img, &idx_labels(&[0, 1, 2]), p, p));
    assert_eq!(loc, "count");
    assert!(msg.contains('3') && msg.contains('2'), "{msg}");

    assert_eq!(format_error(parse_idx(&good_img[..10], &good_lbl, p, p)).0, "header");
    assert!(matches!(
        load_idx(Path::new("/nonexistent/img"), Path::new("/nonexistent/lbl")),
        Err(Error::Io { .. })
    ));
}

#[test]
fn synthetic_blobs_are_separable_by_nearest_centroid() {
    let spec = SyntheticSpec {
        n_classes: 10,
        dim: 784,
        per_class: 100,
        seed: 0,
    };
    let (means, sigma) = spec.centers().unwrap();
    assert!(sigma > 0.0 && sigma <= 0.1);
    let train = spec.generate(Split::Train).unwrap();
    let test = spec.generate(Split::Test).unwrap();
    assert_ne!(train.features(), test.features());
    assert_eq!(spec.generate(Split::Test).unwrap(), test);
    assert!(train.features().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
    for c in 0..10 {
        assert_eq!(train.class_indices(c).len(), 100);
    }
    let correct = (0..test.len())
        .filter(|&i| {
            let x = test.features().row(i);
            let best = (0..10)
                .min_by(|&a, &b| squared_distance(x, means.row(a)).total_cmp(&squared_distance(x, means.row(b))))
                .unwrap();
            best == test.labels()[i]
        })
        .count();
    assert!(correct as f64 / test.len() as f64 >= 0.99);
}

#[test]
fn batching_covers_every_sample_once_per_epoch() {
    let b = batches(1000, 64, 0, 7).unwrap();
    assert_eq!(b.len(), 16);
    assert!(b[..15].iter().all(|x| x.len() == 64));
    assert_eq!(b[15].len(), 40);
    let mut all: Vec<usize> = b.concat();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    assert_ne!(batches(1000, 64, 1, 7).unwrap(), b);
    assert_eq!(batches(1000, 64, 0, 7).unwrap(), b);
    assert!(batches(10, 0, 0, 0).is_err());
}
