//! Hybrid alignment between current-branch and historical-branch
//! classification features: per-sample distance, a margin-based contrastive
//! term over in-batch negatives, and a distance between learned weighted
//! means of the two batches.

use ndarray::{Array1, Array2, Axis};

use crate::config::ContrastiveForm;
use crate::error::{MilError, Result};
use crate::params::{Binder, Linear};
use crate::tape::{Tape, Var};

/// Guard added to row norms before normalising.
pub const NORM_EPS: f64 = 1e-12;

/// Paired pooled features of the two branches, `[N, d]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentBatch {
    current: Array2<f64>,
    historical: Array2<f64>,
}

impl AlignmentBatch {
    pub fn new(current: Array2<f64>, historical: Array2<f64>) -> Result<Self> {
        if current.dim() != historical.dim() {
            return Err(MilError::shape(
                "alignment batch",
                format!("{:?}", current.dim()),
                format!("{:?}", historical.dim()),
            ));
        }
        if current.nrows() == 0 {
            return Err(MilError::shape("alignment batch", "N >= 1", 0));
        }
        if !current.iter().chain(historical.iter()).all(|v| v.is_finite()) {
            return Err(MilError::Data("alignment batch contains non-finite values".into()));
        }
        Ok(Self { current, historical })
    }

    pub fn current(&self) -> &Array2<f64> {
        &self.current
    }

    pub fn historical(&self) -> &Array2<f64> {
        &self.historical
    }

    pub fn len(&self) -> usize {
        self.current.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.current.nrows() == 0
    }
}

/// Affine scorer `d -> 1`; a softmax of its scores over the batch gives the
/// proxy weights `β`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyScorer {
    pub linear: Linear,
}

impl ProxyScorer {
    /// Zero scorer: uniform weights.
    pub fn zeros(width: usize) -> Self {
        Self {
            linear: Linear::zeros(width, 1),
        }
    }

    pub fn weights_var(&self, tape: &mut Tape, binder: &mut Binder, name: &str, features: Var) -> Var {
        let scores = self.linear.forward(tape, binder, name, features);
        tape.softmax_cols(scores)
    }

    /// `β` for a batch of features `[N, d]`.
    pub fn weights(&self, features: &Array2<f64>) -> Array1<f64> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen();
        let f = tape.constant(features.clone());
        let beta = self.weights_var(&mut tape, &mut binder, "scorer", f);
        tape.value(beta).column(0).to_owned()
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.linear.visit(name, f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.linear.visit_mut(name, f);
    }
}

/// Hyperparameters of the combined alignment loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignWeights {
    pub lambda_con: f64,
    pub lambda_dis: f64,
    pub margin: f64,
    pub form: ContrastiveForm,
}

/// Individual terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AlignLosses {
    pub direct: f64,
    pub contrastive: f64,
    pub distribution: f64,
    pub total: f64,
}

/// Mean over samples of `‖cur_i − hist_i‖₂`.
pub fn direct_align_var(tape: &mut Tape, cur: Var, hist: Var) -> Var {
    let diff = tape.sub(cur, hist);
    let norms = tape.row_norm(diff);
    tape.mean_all(norms)
}

/// Mean over ordered pairs `k ≠ j` of `max(0, ĉ_k·ĥ_j − ĉ_k·ĥ_k + ε)` on
/// L2-normalised rows (or the absolute value for [`ContrastiveForm::Absolute`]).
pub fn contrastive_align_var(tape: &mut Tape, cur: Var, hist: Var, margin: f64, form: ContrastiveForm) -> Var {
    let n = tape.value(cur).nrows();
    if n < 2 {
        let zero = tape.constant(Array2::zeros((1, 1)));
        // keep the inputs connected so callers always get a gradient entry
        let c = tape.scale(cur, 0.0);
        let c = tape.sum_all(c);
        return tape.add(zero, c);
    }
    let c = tape.normalize_rows(cur, NORM_EPS);
    let h = tape.normalize_rows(hist, NORM_EPS);
    let sim = tape.matmul_t(c, h);
    let pos = tape.diag(sim);
    let gap = tape.sub_col(sim, pos);
    let gap = tape.add_scalar(gap, margin);
    let terms = match form {
        ContrastiveForm::Hinge => tape.relu(gap),
        ContrastiveForm::Absolute => {
            let p = tape.relu(gap);
            let neg = tape.scale(gap, -1.0);
            let q = tape.relu(neg);
            tape.add(p, q)
        }
    };
    let mask = tape.constant(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 1.0 }));
    let off = tape.mul(terms, mask);
    let total = tape.sum_all(off);
    tape.scale(total, 1.0 / (n * (n - 1)) as f64)
}

/// `‖Σ β_k cur_k − Σ β_k hist_k‖₂` with `β = softmax(scorer(cur))` shared
/// by both sides.
pub fn distribution_align_var(
    tape: &mut Tape,
    binder: &mut Binder,
    scorer: &ProxyScorer,
    name: &str,
    cur: Var,
    hist: Var,
) -> Var {
    let beta = scorer.weights_var(tape, binder, name, cur);
    let bt = tape.transpose(beta);
    let hc = tape.matmul(bt, cur);
    let hh = tape.matmul(bt, hist);
    let diff = tape.sub(hc, hh);
    tape.row_norm(diff)
}

/// Tape nodes of the combined loss and its parts.
pub struct AlignVars {
    pub direct: Var,
    pub contrastive: Var,
    pub distribution: Var,
    pub total: Var,
}

pub fn hybrid_align_var(
    tape: &mut Tape,
    binder: &mut Binder,
    scorer: &ProxyScorer,
    name: &str,
    cur: Var,
    hist: Var,
    w: AlignWeights,
) -> AlignVars {
    let direct = direct_align_var(tape, cur, hist);
    let contrastive = contrastive_align_var(tape, cur, hist, w.margin, w.form);
    let distribution = distribution_align_var(tape, binder, scorer, name, cur, hist);
    let c = tape.scale(contrastive, w.lambda_con);
    let d = tape.scale(distribution, w.lambda_dis);
    let total = tape.add(direct, c);
    let total = tape.add(total, d);
    AlignVars {
        direct,
        contrastive,
        distribution,
        total,
    }
}

fn constants(tape: &mut Tape, batch: &AlignmentBatch) -> (Var, Var) {
    (tape.constant(batch.current.clone()), tape.constant(batch.historical.clone()))
}

pub fn direct_align(batch: &AlignmentBatch) -> f64 {
    let mut tape = Tape::new();
    let (c, h) = constants(&mut tape, batch);
    let l = direct_align_var(&mut tape, c, h);
    tape.scalar(l)
}

/// Hinge-form contrastive alignment with margin `ε`.
pub fn contrastive_align(batch: &AlignmentBatch, margin: f64) -> f64 {
    contrastive_align_with(batch, margin, ContrastiveForm::Hinge)
}

pub fn contrastive_align_with(batch: &AlignmentBatch, margin: f64, form: ContrastiveForm) -> f64 {
    let mut tape = Tape::new();
    let (c, h) = constants(&mut tape, batch);
    let l = contrastive_align_var(&mut tape, c, h, margin, form);
    tape.scalar(l)
}

pub fn distribution_align(batch: &AlignmentBatch, scorer: &ProxyScorer) -> f64 {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let (c, h) = constants(&mut tape, batch);
    let l = distribution_align_var(&mut tape, &mut binder, scorer, "scorer", c, h);
    tape.scalar(l)
}

/// `direct + λ_con·contrastive + λ_dis·distribution`.
pub fn combine(direct: f64, contrastive: f64, distribution: f64, lambda_con: f64, lambda_dis: f64) -> f64 {
    direct + lambda_con * contrastive + lambda_dis * distribution
}

pub fn hybrid_align(batch: &AlignmentBatch, scorer: &ProxyScorer, w: AlignWeights) -> AlignLosses {
    let mut tape = Tape::new();
    let mut binder = Binder::frozen();
    let (c, h) = constants(&mut tape, batch);
    let v = hybrid_align_var(&mut tape, &mut binder, scorer, "scorer", c, h, w);
    AlignLosses {
        direct: tape.scalar(v.direct),
        contrastive: tape.scalar(v.contrastive),
        distribution: tape.scalar(v.distribution),
        total: tape.scalar(v.total),
    }
}

/// Proxy weights of a batch as `[N]`, convenience over [`ProxyScorer::weights`].
pub fn proxy_weights(scorer: &ProxyScorer, current: &Array2<f64>) -> Array1<f64> {
    scorer.weights(current)
}

/// Mean of `β`-weighted rows, used by tests and diagnostics.
pub fn weighted_mean(beta: &Array1<f64>, rows: &Array2<f64>) -> Array1<f64> {
    beta.view().insert_axis(Axis(0)).dot(rows).remove_axis(Axis(0))
}
