//! Accuracy matrix, average accuracy and late-fusion accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::config::{FusionMode, ModelConfig};
use crate::data::{PairedTestSet, Split};
use crate::error::{MilError, Result};
use crate::model::ModelState;
use crate::tape::softmax_rows;

/// Samples per inference batch.
const EVAL_BATCH: usize = 256;

/// Anything that maps a batch of token sequences of one modality to logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    /// `x: [n * len, raw]` -> logits `[n, C]`.
    fn logits(&self, modality: &str, x: &Array2<f64>, len: usize) -> Result<Array2<f64>>;
}

impl Classifier for ModelState {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, modality: &str, x: &Array2<f64>, len: usize) -> Result<Array2<f64>> {
        Ok(self.forward_batch(Some(modality), x, len, false)?.logits)
    }
}

/// Arg-max per row; ties go to the lowest class index.
pub fn predict(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Percentage of predictions equal to the labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(MilError::Eval("empty split".into()));
    }
    if predictions.len() != labels.len() {
        return Err(MilError::Eval(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / labels.len() as f64)
}

/// Logits for a whole split, computed in batches.
pub fn split_logits<C: Classifier + ?Sized>(model: &C, modality: &str, split: &Split) -> Result<Array2<f64>> {
    if split.is_empty() {
        return Err(MilError::Eval(format!("empty split for modality {modality}")));
    }
    let idx: Vec<usize> = (0..split.len()).collect();
    let mut parts = Vec::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        parts.push(model.logits(modality, &split.gather(chunk), split.seq_len)?);
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).map_err(|e| MilError::Eval(e.to_string()))
}

pub fn eval_accuracy<C: Classifier + ?Sized>(model: &C, modality: &str, split: &Split) -> Result<f64> {
    let logits = split_logits(model, modality, split)?;
    accuracy(&predict(&logits), &split.labels)
}

/// Accuracy per class in percent; `None` for classes absent from the split.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Vec<Option<f64>> {
    let mut hit = vec![0usize; num_classes];
    let mut tot = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y < num_classes {
            tot[y] += 1;
            hit[y] += usize::from(p == y);
        }
    }
    hit.iter()
        .zip(&tot)
        .map(|(&h, &t)| (t > 0).then(|| 100.0 * h as f64 / t as f64))
        .collect()
}

/// Average the per-modality outputs of each sample.
pub fn fuse_outputs(per_modality: &[Array2<f64>], mode: FusionMode) -> Result<Array2<f64>> {
    let first = per_modality
        .first()
        .ok_or_else(|| MilError::Data("late fusion needs at least one modality".into()))?;
    let mut acc = Array2::zeros(first.dim());
    for out in per_modality {
        if out.dim() != first.dim() {
            return Err(MilError::Data(format!(
                "misaligned modality outputs: {:?} vs {:?}",
                out.dim(),
                first.dim()
            )));
        }
        match mode {
            FusionMode::Logits => acc += out,
            FusionMode::Probabilities => acc += &softmax_rows(out.view()),
        }
    }
    Ok(acc / per_modality.len() as f64)
}

/// Run every modality of the paired set through `model`, average the
/// outputs per sample and score the arg-max.
pub fn late_fusion_accuracy<C: Classifier + ?Sized>(model: &C, paired: &PairedTestSet, mode: FusionMode) -> Result<f64> {
    let mut outs = Vec::new();
    for (name, split) in &paired.modalities {
        if split.len() != paired.labels.len() {
            return Err(MilError::Data(format!(
                "modality {name} has {} paired samples, expected {}",
                split.len(),
                paired.labels.len()
            )));
        }
        outs.push(split_logits(model, name, split)?);
    }
    let fused = fuse_outputs(&outs, mode)?;
    accuracy(&predict(&fused), &paired.labels)
}

/// Lower-triangular accuracy matrix: row `m` holds the accuracy on the
/// first `m + 1` modalities after training phase `m + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SMatrix {
    pub modalities: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl SMatrix {
    pub fn new(modalities: Vec<String>) -> Self {
        Self {
            modalities,
            rows: Vec::new(),
        }
    }

    pub fn phases(&self) -> usize {
        self.rows.len()
    }

    /// Append the row for the next phase.
    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let expected = self.rows.len() + 1;
        if row.len() != expected {
            return Err(MilError::Eval(format!("row {expected} has {} entries, expected {expected}", row.len())));
        }
        if expected > self.modalities.len() {
            return Err(MilError::Eval(format!("more rows than the {} modalities", self.modalities.len())));
        }
        if let Some(v) = row.iter().find(|v| !(0.0..=100.0).contains(*v)) {
            return Err(MilError::Eval(format!("accuracy {v} outside [0, 100]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// `S[m][n]` with 1-based phase and modality indices, `n <= m`.
    pub fn get(&self, m: usize, n: usize) -> Option<f64> {
        if m == 0 || n == 0 || n > m {
            return None;
        }
        self.rows.get(m - 1).and_then(|r| r.get(n - 1)).copied()
    }

    /// Column header for modality `n` (1-based).
    pub fn label(&self, n: usize) -> &str {
        &self.modalities[n - 1]
    }
}

/// Mean of the first `m` entries of row `m` (1-based).
pub fn average_accuracy(s: &SMatrix, m: usize) -> Result<f64> {
    if m == 0 {
        return Err(MilError::Eval("phase index is 1-based".into()));
    }
    let row = s
        .rows
        .get(m - 1)
        .ok_or_else(|| MilError::Eval(format!("row {m} missing from S-matrix")))?;
    if row.len() < m {
        return Err(MilError::Eval(format!("row {m} has only {} entries", row.len())));
    }
    Ok(row[..m].iter().sum::<f64>() / m as f64)
}

/// Round to two decimals, the precision of reported tables.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub config: ModelConfig,
    pub s: SMatrix,
    /// `AA_m` for each completed phase.
    pub aa: Vec<f64>,
    pub a_multi: Option<f64>,
    /// Final-model accuracy per class, keyed by modality.
    pub per_class: BTreeMap<String, Vec<Option<f64>>>,
}

impl EvalReport {
    pub fn new(method: &str, config: &ModelConfig, s: SMatrix) -> Result<Self> {
        let aa = (1..=s.phases()).map(|m| average_accuracy(&s, m)).collect::<Result<_>>()?;
        Ok(Self {
            method: method.to_string(),
            seed: config.seed,
            config: config.clone(),
            s,
            aa,
            a_multi: None,
            per_class: BTreeMap::new(),
        })
    }

    /// Final average accuracy `AA_T`.
    pub fn final_aa(&self) -> Option<f64> {
        self.aa.last().copied()
    }

    /// Recompute every `AA_m` from `S` and compare against the stored values.
    pub fn check_consistency(&self, tol: f64) -> Result<()> {
        if self.aa.len() != self.s.phases() {
            return Err(MilError::Eval(format!(
                "{} AA entries for {} S-matrix rows",
                self.aa.len(),
                self.s.phases()
            )));
        }
        for (m, &stored) in self.aa.iter().enumerate() {
            let recomputed = average_accuracy(&self.s, m + 1)?;
            if (recomputed - stored).abs() > tol {
                return Err(MilError::Eval(format!(
                    "AA_{} stored as {stored} but S gives {recomputed}",
                    m + 1
                )));
            }
        }
        Ok(())
    }

    /// The S-matrix as CSV: one row per phase, blank above the diagonal.
    pub fn s_csv(&self) -> String {
        let mut out = String::from("phase");
        for m in &self.s.modalities {
            let _ = write!(out, ",{m}");
        }
        out.push_str(",AA\n");
        for (i, row) in self.s.rows.iter().enumerate() {
            let _ = write!(out, "{}", self.s.modalities[i]);
            for n in 0..self.s.modalities.len() {
                match row.get(n) {
                    Some(v) => {
                        let _ = write!(out, ",{v:.2}");
                    }
                    None => out.push(','),
                }
            }
            let _ = writeln!(out, ",{:.2}", self.aa[i]);
        }
        out
    }

    pub fn markdown(&self) -> String {
        let mut out = format!("## {} (seed {})\n\n| after phase |", self.method, self.seed);
        for m in &self.s.modalities {
            let _ = write!(out, " {m} |");
        }
        out.push_str(" AA |\n|---|");
        for _ in 0..=self.s.modalities.len() {
            out.push_str("---|");
        }
        out.push('\n');
        for (i, row) in self.s.rows.iter().enumerate() {
            let _ = write!(out, "| {} |", self.s.modalities[i]);
            for n in 0..self.s.modalities.len() {
                match row.get(n) {
                    Some(v) => {
                        let _ = write!(out, " {v:.2} |");
                    }
                    None => out.push_str(" |"),
                }
            }
            let _ = writeln!(out, " {:.2} |", self.aa[i]);
        }
        if let Some(a) = self.a_multi {
            let _ = writeln!(out, "\nA_multi: {a:.2}");
        }
        out
    }
}
