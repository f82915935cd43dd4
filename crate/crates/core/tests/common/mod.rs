#![allow(dead_code)]

pub mod grad;

use std::path::Path;

use mil_core::data::{generate_benchmark, BenchmarkSpec, DatasetManifest, PhaseDataset, SplitCounts};
use mil_core::params::ParamGrads;
use mil_core::{ModelConfig, ModelState, Parameters};

pub fn small_config(width: usize, depth: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        width,
        heads: 2,
        depth,
        adapter_rank: 4,
        num_classes: classes,
        max_len: 16,
        batch_size: 32,
        ..ModelConfig::default()
    }
}

/// Default benchmark shape, shrunk to `train` training samples and
/// `raw_dim`-wide features.
pub fn small_spec(train: usize, raw_dim: usize, classes: usize) -> BenchmarkSpec {
    let mut spec = BenchmarkSpec {
        num_classes: classes,
        seq_len: 4,
        counts: SplitCounts {
            train,
            val: 40,
            test: 60,
        },
        ..BenchmarkSpec::default()
    };
    for m in &mut spec.modalities {
        m.raw_dim = raw_dim;
    }
    spec
}

pub fn generate(spec: &BenchmarkSpec, dir: &Path) -> (DatasetManifest, Vec<PhaseDataset>) {
    let manifest = generate_benchmark(spec, dir, false).unwrap();
    let phases = manifest
        .modality_names()
        .iter()
        .map(|m| manifest.load_phase(m).unwrap())
        .collect();
    (manifest, phases)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-4)`. The floor makes structurally zero
/// gradients (e.g. a bias under a shift-invariant softmax) compare absolutely.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    diff / norm(a).max(norm(b)).max(1e-4)
}

/// Central differences of `loss` with respect to every parameter whose name
/// satisfies `keep`, compared against `analytic`. Returns the worst
/// per-tensor relative error and its name.
pub fn fd_check(
    model: &ModelState,
    analytic: &ParamGrads,
    keep: impl Fn(&str) -> bool,
    loss: impl Fn(&ModelState) -> f64,
    h: f64,
) -> (f64, String) {
    let mut names = Vec::new();
    model.visit_params(&mut |name, _, _| {
        if keep(name) {
            names.push(name.to_string());
        }
    });
    assert!(!names.is_empty(), "no parameters selected");
    let mut worst = (0.0, String::new());
    for name in names {
        let len = model.param_map()[&name].len();
        let mut numeric = vec![0.0; len];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let shifted = |delta: f64| {
                let mut m = model.clone();
                m.visit_params_mut(&mut |n, v| {
                    if n == name {
                        v[i] += delta;
                    }
                });
                loss(&m)
            };
            *slot = (shifted(h) - shifted(-h)) / (2.0 * h);
        }
        let a = analytic.get(&name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let e = rel_err(a, &numeric);
        if e > worst.0 {
            worst = (e, name);
        }
    }
    worst
}
