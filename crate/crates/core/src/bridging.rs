//! Cumulative knowledge aggregation: the aggregation front-end, the gated
//! low-rank knowledge adapter, projection-free cross-attention fusion, and
//! folding a trained adapter back into the aggregation module.
//!
//! Features are row-major token matrices `[L, d]`; every map acts on rows,
//! so a linear map with matrix `W` sends a token `x` to `x·W`.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat};
use rand::Rng;

use crate::config::MergeMode;
use crate::error::{MilError, Result};
use crate::params::{as_slice_mut1, as_slice_mut2, gaussian, visit_matrix, visit_vector, Binder};
use crate::tape::{AttentionShape, Tape, Var};

/// Standard deviation of the seeded Gaussian used for the adapter's `A`.
pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Per-token affine map `x ↦ x·Wᵀ + b` applied before the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationModule<T = f64> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Rank-`r` adapter with effective weight `ω·B·A` (`A: [r, d]`, `B: [d, r]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAdapter<T = f64> {
    pub a: Array2<T>,
    pub b: Array2<T>,
    pub gate: T,
}

impl<T: NdFloat> AggregationModule<T> {
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Array2::eye(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn width(&self) -> usize {
        self.weight.nrows()
    }
}

impl AggregationModule<f64> {
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Var {
        let w = binder.bind(tape, &format!("{name}.weight"), self.weight.view());
        let b = binder.bind_vector(tape, &format!("{name}.bias"), self.bias.view());
        let y = tape.matmul_t(x, w);
        tape.add_row(y, b)
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_matrix(&format!("{name}.weight"), &self.weight, f);
        visit_vector(&format!("{name}.bias"), &self.bias, f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{name}.weight"), as_slice_mut2(&mut self.weight));
        f(&format!("{name}.bias"), as_slice_mut1(&mut self.bias));
    }
}

impl<T: NdFloat> GatedAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn width(&self) -> usize {
        self.a.ncols()
    }

    /// `ω·B·A`, materialised as a `[d, d]` matrix.
    pub fn effective_weight(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.gate
    }
}

impl GatedAdapter<f64> {
    /// Fresh adapter: `A` seeded Gaussian, `B = 0`, `ω = 1`.
    pub fn init<R: Rng + ?Sized>(width: usize, rank: usize, rng: &mut R) -> Self {
        Self {
            a: gaussian(rank, width, ADAPTER_INIT_STD, rng),
            b: Array2::zeros((width, rank)),
            gate: 1.0,
        }
    }

    /// `x·B·A·ω` as two rank-`r` products.
    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, name: &str, x: Var) -> Var {
        let a = binder.bind(tape, &format!("{name}.a"), self.a.view());
        let b = binder.bind(tape, &format!("{name}.b"), self.b.view());
        let gate = binder.bind_scalar(tape, &format!("{name}.gate"), self.gate);
        let xb = tape.matmul(x, b);
        let xba = tape.matmul(xb, a);
        tape.scale_by(xba, gate)
    }

    pub fn visit(&self, name: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_matrix(&format!("{name}.a"), &self.a, f);
        visit_matrix(&format!("{name}.b"), &self.b, f);
        f(&format!("{name}.gate"), &[], std::slice::from_ref(&self.gate));
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&format!("{name}.a"), as_slice_mut2(&mut self.a));
        f(&format!("{name}.b"), as_slice_mut2(&mut self.b));
        f(&format!("{name}.gate"), std::slice::from_mut(&mut self.gate));
    }
}

fn check_width(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(MilError::shape(context, format!("width {expected}"), format!("width {actual}")));
    }
    Ok(())
}

/// `token ↦ token·weightᵀ + bias` for every token.
pub fn aggregate<T: NdFloat>(module: &AggregationModule<T>, f: ArrayView2<T>) -> Result<Array2<T>> {
    check_width("aggregate", module.weight.ncols(), f.ncols())?;
    Ok(f.dot(&module.weight.t()) + &module.bias)
}

/// `f·(ω·B·A)` without materialising the `[d, d]` product.
pub fn adapter_apply<T: NdFloat>(adapter: &GatedAdapter<T>, f: ArrayView2<T>) -> Result<Array2<T>> {
    check_width("adapter_apply", adapter.b.nrows(), f.ncols())?;
    Ok(f.dot(&adapter.b).dot(&adapter.a) * adapter.gate)
}

/// Projection-free dot-product attention: queries are the filtered
/// historical tokens `[L_h, d]`, keys and values the current tokens
/// `[L_c, d]`. Returns `[L_h, d]`.
pub fn cross_attention_fuse<T: NdFloat>(hist: ArrayView2<T>, cur: ArrayView2<T>) -> Result<Array2<T>> {
    check_width("cross_attention_fuse", hist.ncols(), cur.ncols())?;
    if cur.nrows() == 0 {
        return Err(MilError::shape("cross_attention_fuse", "at least one key token", "0"));
    }
    let scale = T::one() / T::from(hist.ncols()).expect("width as float").sqrt();
    let mut scores = hist.dot(&cur.t()) * scale;
    for mut row in scores.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(scores.dot(&cur))
}

/// Tape version of [`cross_attention_fuse`] over a batch of sequences.
pub fn cross_attention_var(
    tape: &mut Tape,
    hist: Var,
    cur: Var,
    batch: usize,
    hist_len: usize,
    cur_len: usize,
) -> Var {
    let d = tape.value(hist).ncols();
    let shape = AttentionShape {
        batch,
        query_len: hist_len,
        key_len: cur_len,
        heads: 1,
        scale: 1.0 / (d as f64).sqrt(),
    };
    tape.attention(hist, cur, cur, shape)
}

/// Fold `adapter` into `module` with the residual convention.
pub fn merge_adapter<T: NdFloat>(module: &AggregationModule<T>, adapter: &GatedAdapter<T>) -> AggregationModule<T> {
    merge_adapter_with(module, adapter, MergeMode::Residual)
}

/// Fold `adapter` into `module`. With [`MergeMode::Residual`] the result
/// satisfies `aggregate(m', f) = aggregate(m, f) + adapter_apply(a, aggregate(m, f))`;
/// with [`MergeMode::Multiplicative`], `aggregate(m', f) = adapter_apply(a, aggregate(m, f))`.
/// The merged module is again a single `[d, d]` affine map.
pub fn merge_adapter_with<T: NdFloat>(
    module: &AggregationModule<T>,
    adapter: &GatedAdapter<T>,
    mode: MergeMode,
) -> AggregationModule<T> {
    // Row convention: (x·Wᵀ + b)·Wa = x·(Waᵀ·W)ᵀ + b·Wa
    let wa = adapter.effective_weight();
    let lifted_weight = wa.t().dot(&module.weight);
    let lifted_bias = module.bias.view().insert_axis(Axis(0)).dot(&wa).remove_axis(Axis(0));
    match mode {
        MergeMode::Residual => AggregationModule {
            weight: &module.weight + &lifted_weight,
            bias: &module.bias + &lifted_bias,
        },
        MergeMode::Multiplicative => AggregationModule {
            weight: lifted_weight,
            bias: lifted_bias,
        },
    }
}
