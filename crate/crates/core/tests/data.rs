mod common;

use std::fs;

use common::small_spec;
use mil_core::data::{
    generate_benchmark, load_manifest, pooled_features, synthesize, write_manifest, write_split, BenchmarkSpec, SplitKind,
    Transform,
};
use mil_core::MilError;
use ndarray::{Array1, Array2, Axis};
use tempfile::tempdir;

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let spec = small_spec(50, 12, 5);
    let manifest = generate_benchmark(&spec, dir.path(), false).unwrap();
    let memory = synthesize(&spec).unwrap();
    let loaded = load_manifest(dir.path()).unwrap();
    assert_eq!(loaded.name, manifest.name);
    for (m, splits) in &memory {
        for (kind, split) in SplitKind::ALL.iter().zip(splits) {
            let back = loaded.load_split(&m.name, *kind).unwrap();
            assert_eq!(&back, split, "{} {}", m.name, kind.as_str());
            assert!(back.features.iter().zip(&split.features).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn manifest_counts_follow_the_spec() {
    let dir = tempdir().unwrap();
    let spec = BenchmarkSpec::default();
    let manifest = generate_benchmark(&spec, dir.path(), false).unwrap();
    assert_eq!(manifest.num_classes, 10);
    assert_eq!(manifest.modality_names(), ["rgb", "flow", "audio"]);
    for m in &manifest.modalities {
        assert_eq!(
            (m.splits.train.count, m.splits.val.count, m.splits.test.count),
            (700, 100, 200)
        );
        assert_eq!((m.seq_len, m.raw_dim), (8, 64));
    }
    assert_eq!(manifest.paired_test_ids.as_ref().unwrap().len(), 200);
}

#[test]
fn generation_is_byte_identical() {
    let spec = small_spec(30, 8, 4);
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    let ma = generate_benchmark(&spec, a.path(), false).unwrap();
    generate_benchmark(&spec, b.path(), false).unwrap();
    for m in &ma.modalities {
        for kind in SplitKind::ALL {
            let rec = m.splits.get(kind);
            for blob in [&rec.features, &rec.labels, &rec.ids] {
                let x = fs::read(a.path().join(&blob.path)).unwrap();
                let y = fs::read(b.path().join(&blob.path)).unwrap();
                assert_eq!(x, y, "{}", blob.path);
            }
        }
    }
}

#[test]
fn refuses_to_overwrite_without_force() {
    let dir = tempdir().unwrap();
    let spec = small_spec(10, 4, 3);
    generate_benchmark(&spec, dir.path(), false).unwrap();
    let err = generate_benchmark(&spec, dir.path(), false).unwrap_err();
    assert!(matches!(err, MilError::Config { .. }));
    generate_benchmark(&spec, dir.path(), true).unwrap();
}

#[test]
fn truncated_blob_is_an_integrity_error() {
    let dir = tempdir().unwrap();
    let spec = small_spec(20, 6, 4);
    let manifest = generate_benchmark(&spec, dir.path(), false).unwrap();
    let rec = &manifest.modalities[0].splits.train;
    let path = dir.path().join(&rec.features.path);
    let bytes = fs::read(&path).unwrap();
    let per_sample = spec.seq_len * 6 * 4;
    fs::write(&path, &bytes[..bytes.len() - per_sample]).unwrap();
    let loaded = load_manifest(dir.path()).unwrap();
    let err = loaded.load_split("rgb", SplitKind::Train).unwrap_err();
    assert!(matches!(err, MilError::Integrity { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn corrupted_byte_is_an_integrity_error() {
    let dir = tempdir().unwrap();
    let manifest = generate_benchmark(&small_spec(20, 6, 4), dir.path(), false).unwrap();
    let rec = &manifest.modalities[1].splits.test;
    let path = dir.path().join(&rec.labels.path);
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0x01;
    fs::write(&path, bytes).unwrap();
    let err = load_manifest(dir.path()).unwrap().load_split("flow", SplitKind::Test).unwrap_err();
    match err {
        MilError::Integrity { blob, .. } => assert!(blob.ends_with(&rec.labels.path)),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn label_outside_the_class_range_is_a_data_error() {
    let dir = tempdir().unwrap();
    let mut manifest = generate_benchmark(&small_spec(20, 6, 4), dir.path(), false).unwrap();
    let mut split = manifest.load_split("audio", SplitKind::Val).unwrap();
    split.labels[3] = 93;
    let rec = write_split(dir.path(), "audio", SplitKind::Val, &split).unwrap();
    manifest.modalities[2].splits.val = rec;
    write_manifest(&manifest, dir.path()).unwrap();
    let err = load_manifest(dir.path()).unwrap().load_split("audio", SplitKind::Val).unwrap_err();
    assert!(matches!(&err, MilError::Data(msg) if msg.contains("93")), "{err}");
}

#[test]
fn splits_are_disjoint_and_test_ids_pair_across_modalities() {
    let dir = tempdir().unwrap();
    let manifest = generate_benchmark(&small_spec(25, 6, 5), dir.path(), false).unwrap();
    let names = manifest.modality_names();
    let paired = manifest.load_paired_test(&names).unwrap();
    assert_eq!(paired.modalities.len(), 3);
    for (name, split) in &paired.modalities {
        assert_eq!(split.ids, paired.ids, "{name}");
        assert_eq!(split.labels, paired.labels, "{name}");
    }
    for name in &names {
        let p = manifest.load_phase(name).unwrap();
        let mut ids: Vec<u64> = p.train.ids.iter().chain(&p.val.ids).chain(&p.test.ids).copied().collect();
        let n = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), n);
    }
}

#[test]
fn missing_paired_id_is_detected() {
    let dir = tempdir().unwrap();
    let mut manifest = generate_benchmark(&small_spec(20, 6, 4), dir.path(), false).unwrap();
    let test = manifest.load_split("flow", SplitKind::Test).unwrap();
    let keep: Vec<usize> = (1..test.len()).collect();
    let mut short = test.clone();
    short.features = test.gather(&keep);
    short.labels = test.gather_labels(&keep);
    short.ids = keep.iter().map(|&i| test.ids[i]).collect();
    manifest.modalities[1].splits.test = write_split(dir.path(), "flow", SplitKind::Test, &short).unwrap();
    write_manifest(&manifest, dir.path()).unwrap();
    let loaded = load_manifest(dir.path()).unwrap();
    let err = loaded.load_paired_test(&loaded.modality_names()).unwrap_err();
    assert!(matches!(err, MilError::Data(_)));
}

#[test]
fn unknown_modality_and_missing_manifest() {
    let dir = tempdir().unwrap();
    let manifest = generate_benchmark(&small_spec(10, 4, 3), dir.path(), false).unwrap();
    assert_eq!(manifest.load_phase("depth").unwrap_err().exit_code(), 2);
    let empty = tempdir().unwrap();
    assert!(matches!(load_manifest(empty.path()), Err(MilError::Io { .. })));
}

#[test]
fn transforms_are_as_named() {
    assert_eq!(Transform::Identity.apply(-2.0), -2.0);
    assert_eq!(Transform::Abs.apply(-2.0), 2.0);
    assert!((Transform::Tanh.apply(0.5) - 0.5f64.tanh()).abs() < 1e-15);
}

/// L2-regularised multinomial logistic regression by full-batch gradient
/// descent on standardised pooled features.
fn linear_probe(train_x: &Array2<f64>, train_y: &[usize], test_x: &Array2<f64>, classes: usize) -> Vec<usize> {
    let mean = train_x.mean_axis(Axis(0)).unwrap();
    let std = train_x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-8));
    let norm = |x: &Array2<f64>| (x - &mean) / &std;
    let (xtr, xte) = (norm(train_x), norm(test_x));
    let (n, d) = xtr.dim();
    let mut w = Array2::<f64>::zeros((d, classes));
    let mut b = Array1::<f64>::zeros(classes);
    let mut onehot = Array2::<f64>::zeros((n, classes));
    for (i, &y) in train_y.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    for _ in 0..300 {
        let mut p = xtr.dot(&w) + &b;
        for mut row in p.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        let err = (p - &onehot) / n as f64;
        w = &w - &((xtr.t().dot(&err) + &w * 1e-3) * 0.5);
        b = &b - &(err.sum_axis(Axis(0)) * 0.5);
    }
    let scores = xte.dot(&w) + &b;
    scores
        .rows()
        .into_iter()
        .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc }).0)
        .collect()
}

#[test]
fn class_signal_survives_every_modality_map() {
    let spec = BenchmarkSpec::default();
    let data = synthesize(&spec).unwrap();
    for (m, [train, _, test]) in &data {
        let pred = linear_probe(&pooled_features(train), &train.labels, &pooled_features(test), spec.num_classes);
        let correct = pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 3.0 / spec.num_classes as f64, "{}: probe accuracy {acc}", m.name);
    }
}
