//! Comparison methods: parameter-distance regularisation (FullR), Fisher
//! weighted regularisation (EwC) and logit distillation (LwF).

use std::collections::HashMap;

use ndarray::Array2;

use crate::config::ModelConfig;
use crate::data::{PairedTestSet, PhaseDataset};
use crate::error::{MilError, Result};
use crate::evaluation::EvalReport;
use crate::model::{names, ModelState};
use crate::params::{Binder, ParamGrads, Parameters};
use crate::tape::{softmax_rows, Tape};
use crate::trainer::{run_sequence, Method, PhaseSnapshot, RunHooks};

/// Samples per backward pass while estimating the Fisher diagonal.
const FISHER_CHUNK: usize = 1;

/// Per-parameter importance weights keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FisherDiagonal {
    pub values: HashMap<String, Vec<f64>>,
}

impl FisherDiagonal {
    /// All-ones weights for every shared parameter of `model`.
    pub fn ones_like(model: &ModelState) -> Self {
        let mut values = HashMap::new();
        model.visit_params(&mut |name, _, v| {
            if names::is_shared(name) {
                values.insert(name.to_string(), vec![1.0; v.len()]);
            }
        });
        Self { values }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in &self.values {
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(MilError::Invariant(format!("fisher entry {x} for {name} is negative or non-finite")));
            }
        }
        Ok(())
    }

    /// Empirical Fisher: mean over training samples of the squared
    /// per-sample gradient of the classification loss, for every shared
    /// parameter.
    pub fn estimate(model: &ModelState, data: &PhaseDataset) -> Result<Self> {
        let split = &data.train;
        if split.is_empty() {
            return Err(MilError::Data(format!("modality {}: empty train split", data.modality)));
        }
        let mut acc: HashMap<String, Vec<f64>> = HashMap::new();
        let idx: Vec<usize> = (0..split.len()).collect();
        for chunk in idx.chunks(FISHER_CHUNK) {
            let mut tape = Tape::new();
            let mut binder = Binder::with_filter(names::is_shared);
            let x = tape.constant(split.gather(chunk));
            let x = model.project_input(&mut tape, &mut binder, Some(&data.modality), x)?;
            let (_, logits) = model.forward_var(&mut tape, &mut binder, x, chunk.len(), split.seq_len, false)?;
            let loss = tape.cross_entropy(logits, &split.gather_labels(chunk));
            let grads = binder.gradients(&tape, &tape.backward(loss));
            for (name, g) in grads {
                let slot = acc.entry(name).or_insert_with(|| vec![0.0; g.len()]);
                for (s, gi) in slot.iter_mut().zip(&g) {
                    *s += gi * gi;
                }
            }
        }
        let n = idx.chunks(FISHER_CHUNK).count() as f64;
        for v in acc.values_mut() {
            v.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self { values: acc })
    }
}

/// Visit shared parameters of `model` alongside the snapshot's values.
fn paired_shared(
    model: &ModelState,
    snapshot: &PhaseSnapshot,
    mut f: impl FnMut(&str, &[f64], &[f64]) -> Result<()>,
) -> Result<()> {
    let anchor = snapshot.model().param_map();
    let mut result = Ok(());
    model.visit_params(&mut |name, _, cur| {
        if result.is_err() || !names::is_shared(name) {
            return;
        }
        result = match anchor.get(name) {
            Some(old) if old.len() == cur.len() => f(name, cur, old),
            Some(old) => Err(MilError::Structure(format!(
                "parameter {name}: {} values in model, {} in snapshot",
                cur.len(),
                old.len()
            ))),
            None => Err(MilError::Structure(format!("parameter {name} missing from snapshot"))),
        };
    });
    result
}

/// Sum of squared differences over shared parameters divided by their count.
pub fn fullr_penalty(model: &ModelState, snapshot: &PhaseSnapshot) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    paired_shared(model, snapshot, |_, cur, old| {
        sum += cur.iter().zip(old).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += cur.len();
        Ok(())
    })?;
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Gradient of `weight · fullr_penalty`.
pub fn fullr_gradients(model: &ModelState, snapshot: &PhaseSnapshot, weight: f64) -> Result<ParamGrads> {
    let mut count = 0usize;
    paired_shared(model, snapshot, |_, cur, _| {
        count += cur.len();
        Ok(())
    })?;
    let scale = 2.0 * weight / count.max(1) as f64;
    let mut out = ParamGrads::new();
    paired_shared(model, snapshot, |name, cur, old| {
        out.insert(name.to_string(), cur.iter().zip(old).map(|(a, b)| scale * (a - b)).collect());
        Ok(())
    })?;
    Ok(out)
}

/// `weight / 2 · Σ F (θ − θ*)²` over shared parameters.
pub fn ewc_penalty(model: &ModelState, snapshot: &PhaseSnapshot, fisher: &FisherDiagonal, weight: f64) -> Result<f64> {
    let mut sum = 0.0;
    paired_shared(model, snapshot, |name, cur, old| {
        let f = fisher_entry(fisher, name, cur.len())?;
        sum += cur.iter().zip(old).zip(f).map(|((a, b), w)| w * (a - b) * (a - b)).sum::<f64>();
        Ok(())
    })?;
    Ok(0.5 * weight * sum)
}

pub fn ewc_gradients(model: &ModelState, snapshot: &PhaseSnapshot, fisher: &FisherDiagonal, weight: f64) -> Result<ParamGrads> {
    let mut out = ParamGrads::new();
    paired_shared(model, snapshot, |name, cur, old| {
        let f = fisher_entry(fisher, name, cur.len())?;
        out.insert(
            name.to_string(),
            cur.iter().zip(old).zip(f).map(|((a, b), w)| weight * w * (a - b)).collect(),
        );
        Ok(())
    })?;
    Ok(out)
}

fn fisher_entry<'a>(fisher: &'a FisherDiagonal, name: &str, len: usize) -> Result<&'a [f64]> {
    match fisher.values.get(name) {
        Some(v) if v.len() == len => Ok(v),
        Some(v) => Err(MilError::Structure(format!("fisher for {name} has {} entries, expected {len}", v.len()))),
        None => Err(MilError::config("fisher", format!("no importance estimate for parameter {name}"))),
    }
}

/// `T² · mean_b KL(softmax(snapshot_b / T) ‖ softmax(current_b / T))`.
pub fn lwf_loss(current_logits: &Array2<f64>, snapshot_logits: &Array2<f64>, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(MilError::config("lwf_temperature", "must be positive"));
    }
    if current_logits.dim() != snapshot_logits.dim() {
        return Err(MilError::shape(
            "lwf_loss",
            format!("{:?}", snapshot_logits.dim()),
            format!("{:?}", current_logits.dim()),
        ));
    }
    let target = softmax_rows((snapshot_logits / temperature).view());
    let mut tape = Tape::new();
    let cur = tape.constant(current_logits.clone());
    let loss = tape.soft_target_kl(cur, target, temperature);
    Ok(tape.scalar(loss))
}

/// Run the full phase sequence for `method_id`.
pub fn run_baseline(
    method_id: &str,
    phases: &[PhaseDataset],
    config: &ModelConfig,
    paired: Option<&PairedTestSet>,
) -> Result<EvalReport> {
    let method: Method = method_id.parse()?;
    Ok(run_sequence(method, phases, config, paired, RunHooks::default())?.eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use crate::trainer::snapshot_model;
    use ndarray::array;

    fn small() -> ModelState {
        init_model(&ModelConfig {
            width: 8,
            heads: 2,
            depth: 1,
            adapter_rank: 2,
            num_classes: 3,
            max_len: 4,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn penalties_vanish_at_identity() {
        let m = small();
        let s = snapshot_model(&m, 1);
        assert_eq!(fullr_penalty(&m, &s).unwrap(), 0.0);
        assert_eq!(ewc_penalty(&m, &s, &FisherDiagonal::ones_like(&m), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn single_parameter_shift() {
        let m = small();
        let s = snapshot_model(&m, 1);
        let mut moved = m.clone();
        moved.classifier.bias[0] += 2.0;
        let count: usize = {
            let mut c = 0;
            m.visit_params(&mut |n, _, v| {
                if names::is_shared(n) {
                    c += v.len()
                }
            });
            c
        };
        assert!((fullr_penalty(&moved, &s).unwrap() - 4.0 / count as f64).abs() < 1e-15);
        let ewc = ewc_penalty(&moved, &s, &FisherDiagonal::ones_like(&m), 1.0).unwrap();
        assert!((ewc - 2.0).abs() < 1e-12);

        let mut zero = FisherDiagonal::ones_like(&m);
        zero.values.get_mut("classifier.bias").unwrap()[0] = 0.0;
        assert_eq!(ewc_penalty(&moved, &s, &zero, 1.0).unwrap(), 0.0);

        let mut further = moved.clone();
        further.classifier.bias[0] += 1.0;
        assert!(fullr_penalty(&further, &s).unwrap() > fullr_penalty(&moved, &s).unwrap());
    }

    #[test]
    fn missing_fisher_is_config_error() {
        let m = small();
        let s = snapshot_model(&m, 1);
        let empty = FisherDiagonal::default();
        assert!(matches!(ewc_penalty(&m, &s, &empty, 1.0), Err(MilError::Config { .. })));
    }

    #[test]
    fn lwf_examples() {
        let a = array![[0.3, -1.0, 2.0]];
        assert!(lwf_loss(&a, &a, 2.0).unwrap().abs() < 1e-12);
        let cur = array![[0.0, 0.0]];
        let snap = array![[3f64.ln(), 0.0]];
        let expect = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((lwf_loss(&cur, &snap, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.1308).abs() < 1e-3);
        let pair = (array![[1.0, -0.5, 0.2]], array![[-0.3, 0.8, 0.0]]);
        assert!(lwf_loss(&pair.0, &pair.1, 10.0).unwrap() < lwf_loss(&pair.0, &pair.1, 1.0).unwrap());
    }

    #[test]
    fn penalty_gradients_match_finite_differences() {
        let m = small();
        let s = snapshot_model(&m, 1);
        let mut moved = m.clone();
        moved.classifier.weight[[1, 2]] += 0.7;
        moved.aggregation.bias[3] -= 0.4;
        let mut fisher = FisherDiagonal::ones_like(&m);
        fisher.values.get_mut("aggregation.bias").unwrap()[3] = 2.5;
        let g = ewc_gradients(&moved, &s, &fisher, 3.0).unwrap();
        let h = 1e-6;
        let mut plus = moved.clone();
        plus.aggregation.bias[3] += h;
        let mut minus = moved.clone();
        minus.aggregation.bias[3] -= h;
        let fd = (ewc_penalty(&plus, &s, &fisher, 3.0).unwrap() - ewc_penalty(&minus, &s, &fisher, 3.0).unwrap()) / (2.0 * h);
        assert!((fd - g["aggregation.bias"][3]).abs() < 1e-6);

        let g = fullr_gradients(&moved, &s, 5.0).unwrap();
        let mut plus = moved.clone();
        plus.classifier.weight[[1, 2]] += h;
        let mut minus = moved.clone();
        minus.classifier.weight[[1, 2]] -= h;
        let fd = 5.0 * (fullr_penalty(&plus, &s).unwrap() - fullr_penalty(&minus, &s).unwrap()) / (2.0 * h);
        assert!((fd - g["classifier.weight"][1 * 8 + 2]).abs() < 1e-8);
    }
}
