mod common;

use std::collections::BTreeMap;

use common::{generate, small_config, small_spec};
use mil_core::baselines::{ewc_penalty, fullr_penalty, lwf_loss, run_baseline, FisherDiagonal};
use mil_core::evaluation::eval_accuracy;
use mil_core::model::names;
use mil_core::params::checksum_filtered;
use mil_core::trainer::{run_sequence, snapshot_model, train_phase, PhaseEnd, RunHooks};
use mil_core::{init_model, Method, ModelConfig, ModelState, Parameters};
use ndarray::{array, Array2};
use proptest::prelude::*;
use tempfile::tempdir;

fn tiny() -> ModelState {
    init_model(&small_config(8, 1, 3)).unwrap()
}

#[test]
fn harmony_dispatch_matches_manual_sequence() {
    let dir = tempdir().unwrap();
    let (_, phases) = generate(&small_spec(120, 16, 10), dir.path());
    let mut cfg = small_config(16, 1, 10);
    cfg.epochs = 2;
    let report = run_baseline("harmony", &phases, &cfg, None).unwrap();

    let mut model = init_model(&cfg).unwrap();
    let mut snapshot = None;
    for (t, p) in phases.iter().enumerate() {
        let (next, _) = train_phase(model, snapshot.as_ref(), p, &cfg).unwrap();
        model = next;
        let row: Vec<f64> = phases[..=t]
            .iter()
            .map(|q| eval_accuracy(&model, &q.modality, &q.test).unwrap())
            .collect();
        for (n, acc) in row.iter().enumerate() {
            assert_eq!(report.s.get(t + 1, n + 1), Some(*acc));
        }
        snapshot = Some(snapshot_model(&model, t + 1));
    }
}

#[test]
fn frozen_keeps_backbone_and_aggregation() {
    let dir = tempdir().unwrap();
    let (_, phases) = generate(&small_spec(120, 16, 10), dir.path());
    let mut cfg = small_config(16, 1, 10);
    cfg.epochs = 2;
    let mut sums = Vec::new();
    let mut classifier = Vec::new();
    let mut hook = |e: &PhaseEnd| {
        sums.push(checksum_filtered(e.model, |n| names::is_backbone(n) || names::is_aggregation(n)));
        classifier.push(checksum_filtered(e.model, names::is_classifier));
        Ok(())
    };
    let hooks = RunHooks {
        on_step: None,
        on_phase_end: Some(&mut hook),
    };
    run_sequence(Method::Frozen, &phases, &cfg, None, hooks).unwrap();
    assert_eq!(sums.len(), 3);
    assert_eq!(sums[0], sums[2]);
    assert_ne!(classifier[0], classifier[2]);
}

#[test]
fn every_method_shares_the_first_phase() {
    let dir = tempdir().unwrap();
    let (manifest, phases) = generate(&small_spec(80, 16, 10), dir.path());
    let paired = manifest.load_paired_test(&manifest.modality_names()).unwrap();
    let mut cfg = small_config(16, 1, 10);
    cfg.epochs = 1;
    let mut first: BTreeMap<&str, String> = BTreeMap::new();
    for method in Method::ALL {
        let mut seen = None;
        let mut hook = |e: &PhaseEnd| {
            if e.phase == 1 {
                seen = Some(e.model.checksum());
            }
            Ok(())
        };
        let hooks = RunHooks {
            on_step: None,
            on_phase_end: Some(&mut hook),
        };
        let out = run_sequence(method, &phases, &cfg, Some(&paired), hooks).unwrap();
        out.eval.check_consistency(1e-9).unwrap();
        assert_eq!(out.eval.s.phases(), 3);
        assert!(out.eval.a_multi.is_some());
        first.insert(method.as_str(), seen.unwrap());
    }
    let distinct: std::collections::BTreeSet<_> = first.values().collect();
    assert_eq!(distinct.len(), 1, "{first:?}");
}

#[test]
fn sequential_finetuning_forgets() {
    let dir = tempdir().unwrap();
    let (_, phases) = generate(&small_spec(300, 16, 10), dir.path());
    let mut cfg = small_config(16, 1, 10);
    cfg.epochs = 15;
    let report = run_baseline("seqf", &phases, &cfg, None).unwrap();
    let (s11, s31) = (report.s.get(1, 1).unwrap(), report.s.get(3, 1).unwrap());
    assert!(s31 < s11, "S11 {s11} S31 {s31}");
}

#[test]
fn unknown_method_is_rejected() {
    let err = run_baseline("nosuch", &[], &ModelConfig::default(), None).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn fisher_estimate_is_nonnegative_over_shared_parameters() {
    let dir = tempdir().unwrap();
    let (_, phases) = generate(&small_spec(40, 16, 10), dir.path());
    let model = init_model(&small_config(16, 1, 10)).unwrap();
    let fisher = FisherDiagonal::estimate(&model, &phases[0]).unwrap();
    fisher.validate().unwrap();
    model.visit_params(&mut |name, _, v| {
        if names::is_shared(name) {
            assert_eq!(fisher.values[name].len(), v.len(), "{name}");
        }
    });
    assert!(fisher.values.values().flatten().any(|&f| f > 0.0));
}

#[test]
fn penalty_grows_with_drift() {
    let m = tiny();
    let s = snapshot_model(&m, 1);
    let fisher = FisherDiagonal::ones_like(&m);
    let mut prev = (0.0, 0.0);
    for step in 1..5 {
        let mut moved = m.clone();
        moved.classifier.weight[[0, 0]] += step as f64 * 0.5;
        let cur = (fullr_penalty(&moved, &s).unwrap(), ewc_penalty(&moved, &s, &fisher, 1.0).unwrap());
        assert!(cur.0 > prev.0 && cur.1 > prev.1);
        prev = cur;
    }
}

#[test]
fn ewc_with_unit_fisher_is_half_squared_distance() {
    let m = tiny();
    let s = snapshot_model(&m, 1);
    let mut moved = m.clone();
    moved.classifier.weight[[1, 2]] += 0.3;
    moved.layers[0].query.bias[0] -= 0.4;
    let ewc = ewc_penalty(&moved, &s, &FisherDiagonal::ones_like(&m), 1.0).unwrap();
    assert!((ewc - 0.5 * (0.09 + 0.16)).abs() < 1e-12);
}

#[test]
fn zero_fisher_ignores_drift() {
    let m = tiny();
    let s = snapshot_model(&m, 1);
    let mut fisher = FisherDiagonal::ones_like(&m);
    fisher.values.get_mut("classifier.weight").unwrap().fill(0.0);
    let mut moved = m.clone();
    moved.classifier.weight.fill(7.0);
    assert_eq!(ewc_penalty(&moved, &s, &fisher, 1.0).unwrap(), 0.0);
}

#[test]
fn lwf_softens_with_temperature() {
    let cur = array![[0.0, 0.0], [1.0, -1.0]];
    let old = array![[3f64.ln(), 0.0], [-1.0, 2.0]];
    // the T² factor keeps gradient scale; the softened divergence itself shrinks
    let softened = |t: f64| lwf_loss(&cur, &old, t).unwrap() / (t * t);
    assert!(softened(10.0) < softened(1.0));
    assert!(softened(100.0) < 1e-3);
    let two = lwf_loss(&array![[0.0, 0.0]], &array![[3f64.ln(), 0.0]], 1.0).unwrap();
    assert!((two - 0.1308).abs() < 1e-3);
    assert!((two - (0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln())).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn penalties_are_nonnegative(shifts in prop::collection::vec(-3.0f64..3.0, 9), fisher_scale in 0.0f64..5.0) {
        let m = tiny();
        let s = snapshot_model(&m, 1);
        let mut moved = m.clone();
        moved.classifier.weight.iter_mut().zip(&shifts).for_each(|(w, d)| *w += d);
        let mut fisher = FisherDiagonal::ones_like(&m);
        fisher.values.values_mut().flatten().for_each(|f| *f = fisher_scale);
        let full = fullr_penalty(&moved, &s).unwrap();
        let ewc = ewc_penalty(&moved, &s, &fisher, 2.0).unwrap();
        prop_assert!(full >= 0.0 && ewc >= 0.0);
        if shifts.iter().any(|&d| d != 0.0) {
            prop_assert!(full > 0.0);
        }
    }

    #[test]
    fn lwf_is_nonnegative_and_zero_on_identical_logits(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        t in 0.5f64..8.0,
    ) {
        let cur = Array2::from_shape_vec((2, 3), a).unwrap();
        let old = Array2::from_shape_vec((2, 3), b).unwrap();
        prop_assert!(lwf_loss(&cur, &old, t).unwrap() >= -1e-12);
        prop_assert!(lwf_loss(&cur, &cur, t).unwrap().abs() < 1e-12);
    }
}
