//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Leaves are either parameters (gradients tracked) or constants. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! a [`Gradients`] table indexed by [`Var`].
//!
//! Sequence-shaped values use a flattened layout: a batch of `n` sequences
//! of length `len` and width `d` is a `[n * len, d]` matrix whose rows
//! `b * len .. (b + 1) * len` belong to sequence `b`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionShape {
    pub batch: usize,
    pub query_len: usize,
    pub key_len: usize,
    pub heads: usize,
    pub scale: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    SubCol(Var, Var),
    MulCol(Var, Var),
    ScaleBy(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    MeanPool(Var, usize),
    TileRows(Var, usize),
    AddPositional(Var, Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttentionShape,
        probs: Vec<Array2<f64>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Array2<f64>,
    },
    SoftTargetKl {
        logits: Var,
        target: Array2<f64>,
        temperature: f64,
        probs: Array2<f64>,
    },
    SumAll(Var),
    MeanAll(Var),
    RowNorm(Var),
    NormalizeRows(Var, f64),
    Diag(Var),
    Column(Var, usize),
    Row(Var, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Gradient table returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to the leaf `v`, or `None` when `v`
    /// does not influence the loss through tracked nodes. Gradients of
    /// interior nodes are released during the backward sweep.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Row-wise numerically stable softmax.
pub fn softmax_rows(x: ArrayView2<f64>) -> Array2<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

fn softmax_rows_backward(y: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let mut dx = Array2::zeros(y.raw_dim());
    for ((mut dxr, yr), gr) in dx.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
        let dot = yr.dot(&gr);
        Zip::from(&mut dxr)
            .and(&yr)
            .and(&gr)
            .for_each(|d, &yv, &gv| *d = yv * (gv - dot));
    }
    dx
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let tracked = self.tracked(a);
        self.push(value, op, tracked)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, op, tracked)
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.binary(a, b, v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.binary(a, b, v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.unary(a, v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.binary(a, b, v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.binary(a, b, v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.binary(a, b, v, Op::Mul(a, b))
    }

    /// `x[N, D] + row[1, D]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) + self.value(row);
        self.binary(x, row, v, Op::AddRow(x, row))
    }

    /// `x[N, D] ⊙ row[1, D]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let v = self.value(x) * self.value(row);
        self.binary(x, row, v, Op::MulRow(x, row))
    }

    /// `x[N, M] - col[N, 1]` broadcast over columns.
    pub fn sub_col(&mut self, x: Var, col: Var) -> Var {
        let v = self.value(x) - self.value(col);
        self.binary(x, col, v, Op::SubCol(x, col))
    }

    /// `x[N, M] ⊙ col[N, 1]` broadcast over columns.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let v = self.value(x) * self.value(col);
        self.binary(x, col, v, Op::MulCol(x, col))
    }

    /// `x · s` for a `[1, 1]` node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(x) * sv;
        self.binary(x, s, v, Op::ScaleBy(x, s))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) * c;
        self.unary(x, v, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) + c;
        self.unary(x, v, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        self.unary(x, v, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.unary(x, v, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|a| a.max(0.0));
        self.unary(x, v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::exp);
        self.unary(x, v, Op::Exp(x))
    }

    /// Elementwise clamp; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(x).mapv(|a| a.clamp(lo, hi));
        self.unary(x, v, Op::Clamp(x, lo, hi))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x).view());
        self.unary(x, v, Op::SoftmaxRows(x))
    }

    pub fn softmax_cols(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x).t()).reversed_axes();
        self.unary(x, v, Op::SoftmaxCols(x))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of shape `[1, D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.dot(&row) / d;
            let is = 1.0 / (var + eps).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            tracked,
        )
    }

    /// Mean over each sequence: `[n * len, D] -> [n, D]`.
    pub fn mean_pool(&mut self, x: Var, len: usize) -> Var {
        let v = mean_pool(self.value(x).view(), len);
        self.unary(x, v, Op::MeanPool(x, len))
    }

    /// Repeat each row `len` times: `[n, D] -> [n * len, D]`.
    pub fn tile_rows(&mut self, x: Var, len: usize) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.dim();
        let mut out = Array2::zeros((n * len, d));
        for b in 0..n {
            out.slice_mut(s![b * len..(b + 1) * len, ..])
                .assign(&xv.row(b).broadcast((len, d)).expect("broadcast row"));
        }
        self.unary(x, out, Op::TileRows(x, len))
    }

    /// Add the first `len` rows of `pos` to every sequence of `x`.
    pub fn add_positional(&mut self, x: Var, pos: Var, len: usize) -> Var {
        let xv = self.value(x);
        let pv = self.value(pos).slice(s![..len, ..]);
        let mut out = xv.clone();
        for mut chunk in out.axis_chunks_iter_mut(Axis(0), len) {
            chunk += &pv;
        }
        self.binary(x, pos, out, Op::AddPositional(x, pos, len))
    }

    /// Scaled dot-product attention over per-sequence blocks, split into
    /// `heads` column groups. No projections are applied here.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttentionShape) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / shape.heads;
        let mut out = Array2::zeros((shape.batch * shape.query_len, d));
        let mut probs = Vec::with_capacity(shape.batch * shape.heads);
        for b in 0..shape.batch {
            let qr = b * shape.query_len..(b + 1) * shape.query_len;
            let kr = b * shape.key_len..(b + 1) * shape.key_len;
            for h in 0..shape.heads {
                let cols = h * dh..(h + 1) * dh;
                let qb = qv.slice(s![qr.clone(), cols.clone()]);
                let kb = kv.slice(s![kr.clone(), cols.clone()]);
                let vb = vv.slice(s![kr.clone(), cols.clone()]);
                let scores = qb.dot(&kb.t()) * shape.scale;
                let p = softmax_rows(scores.view());
                out.slice_mut(s![qr.clone(), cols]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            tracked,
        )
    }

    /// Mean cross-entropy of `logits[N, C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let probs = softmax_rows(lv.view());
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
            loss += lse - row[y];
        }
        let v = Array2::from_elem((1, 1), loss / n);
        self.unary(
            logits,
            v,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// `T² · mean_b KL(target_b ‖ softmax(logits_b / T))` with a constant
    /// target distribution.
    pub fn soft_target_kl(&mut self, logits: Var, target: Array2<f64>, temperature: f64) -> Var {
        let lv = self.value(logits);
        let scaled = lv / temperature;
        let probs = softmax_rows(scaled.view());
        let n = lv.nrows() as f64;
        let mut total = 0.0;
        for (prow, (srow, trow)) in probs.rows().into_iter().zip(scaled.rows().into_iter().zip(target.rows())) {
            let max = srow.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = max + srow.mapv(|v| (v - max).exp()).sum().ln();
            for ((&t, &s), _) in trow.iter().zip(srow.iter()).zip(prow.iter()) {
                if t > 0.0 {
                    total += t * (t.ln() - (s - lse));
                }
            }
        }
        let v = Array2::from_elem((1, 1), temperature * temperature * total / n);
        self.unary(
            logits,
            v,
            Op::SoftTargetKl {
                logits,
                target,
                temperature,
                probs,
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(x).sum());
        self.unary(x, v, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Array2::from_elem((1, 1), xv.sum() / xv.len() as f64);
        self.unary(x, v, Op::MeanAll(x))
    }

    /// Euclidean norm of each row: `[N, D] -> [N, 1]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map_axis(Axis(1), |r| r.dot(&r).sqrt())
            .insert_axis(Axis(1));
        self.unary(x, v, Op::RowNorm(x))
    }

    /// `x / (‖x‖ + eps)` per row.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        for mut r in v.rows_mut() {
            let n = r.dot(&r).sqrt();
            r /= n + eps;
        }
        self.unary(x, v, Op::NormalizeRows(x, eps))
    }

    /// Diagonal of a square matrix as a column: `[N, N] -> [N, 1]`.
    pub fn diag(&mut self, x: Var) -> Var {
        let v = self.value(x).diag().to_owned().insert_axis(Axis(1));
        self.unary(x, v, Op::Diag(x))
    }

    pub fn column(&mut self, x: Var, j: usize) -> Var {
        let v = self.value(x).column(j).to_owned().insert_axis(Axis(1));
        self.unary(x, v, Op::Column(x, j))
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        let v = self.value(x).row(i).to_owned().insert_axis(Axis(0));
        self.unary(x, v, Op::Row(x, i))
    }
}

/// Mean over each length-`len` block of rows: `[n * len, D] -> [n, D]`.
pub fn mean_pool(x: ArrayView2<f64>, len: usize) -> Array2<f64> {
    let (rows, d) = x.dim();
    let n = rows / len;
    let mut out = Array2::zeros((n, d));
    for (mut o, chunk) in out.rows_mut().into_iter().zip(x.axis_chunks_iter(Axis(0), len)) {
        o.assign(&chunk.mean_axis(Axis(0)).expect("non-empty sequence"));
    }
    out
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    /// Back-propagate from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let tr = |v: Var| self.nodes[v.0].tracked;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if tr(a) {
                    accumulate(grads, a, g.dot(&val(b).t()));
                }
                if tr(b) {
                    accumulate(grads, b, val(a).t().dot(g));
                }
            }
            &Op::MatMulT(a, b) => {
                if tr(a) {
                    accumulate(grads, a, g.dot(val(b)));
                }
                if tr(b) {
                    accumulate(grads, b, g.t().dot(val(a)));
                }
            }
            &Op::Transpose(a) => accumulate(grads, a, g.t().to_owned()),
            &Op::Add(a, b) => {
                if tr(a) {
                    accumulate(grads, a, g.clone());
                }
                if tr(b) {
                    accumulate(grads, b, g.clone());
                }
            }
            &Op::Sub(a, b) => {
                if tr(a) {
                    accumulate(grads, a, g.clone());
                }
                if tr(b) {
                    accumulate(grads, b, -g);
                }
            }
            &Op::Mul(a, b) => {
                if tr(a) {
                    accumulate(grads, a, g * val(b));
                }
                if tr(b) {
                    accumulate(grads, b, g * val(a));
                }
            }
            &Op::AddRow(x, row) => {
                if tr(x) {
                    accumulate(grads, x, g.clone());
                }
                if tr(row) {
                    accumulate(grads, row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::MulRow(x, row) => {
                if tr(x) {
                    accumulate(grads, x, g * val(row));
                }
                if tr(row) {
                    accumulate(grads, row, (g * val(x)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            &Op::SubCol(x, col) => {
                if tr(x) {
                    accumulate(grads, x, g.clone());
                }
                if tr(col) {
                    accumulate(grads, col, -g.sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            &Op::MulCol(x, col) => {
                if tr(x) {
                    accumulate(grads, x, g * val(col));
                }
                if tr(col) {
                    accumulate(grads, col, (g * val(x)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            &Op::ScaleBy(x, s) => {
                let sv = val(s)[[0, 0]];
                if tr(x) {
                    accumulate(grads, x, g * sv);
                }
                if tr(s) {
                    let ds = (g * val(x)).sum();
                    accumulate(grads, s, Array2::from_elem((1, 1), ds));
                }
            }
            &Op::Scale(x, c) => accumulate(grads, x, g * c),
            &Op::AddScalar(x) => accumulate(grads, x, g.clone()),
            &Op::Tanh(x) => {
                let dx = Zip::from(g).and(&node.value).map_collect(|&gv, &y| gv * (1.0 - y * y));
                accumulate(grads, x, dx);
            }
            &Op::Gelu(x) => {
                let dx = Zip::from(g).and(val(x)).map_collect(|&gv, &xv| gv * gelu_grad(xv));
                accumulate(grads, x, dx);
            }
            &Op::Relu(x) => {
                let dx = Zip::from(g)
                    .and(val(x))
                    .map_collect(|&gv, &xv| if xv > 0.0 { gv } else { 0.0 });
                accumulate(grads, x, dx);
            }
            &Op::Exp(x) => accumulate(grads, x, g * &node.value),
            &Op::Clamp(x, lo, hi) => {
                let dx = Zip::from(g)
                    .and(val(x))
                    .map_collect(|&gv, &xv| if xv >= lo && xv <= hi { gv } else { 0.0 });
                accumulate(grads, x, dx);
            }
            &Op::SoftmaxRows(x) => accumulate(grads, x, softmax_rows_backward(&node.value, g)),
            &Op::SoftmaxCols(x) => {
                let yt = node.value.t().to_owned();
                let gt = g.t().to_owned();
                accumulate(grads, x, softmax_rows_backward(&yt, &gt).reversed_axes());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                if tr(*gamma) {
                    accumulate(grads, *gamma, (g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if tr(*beta) {
                    accumulate(grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if tr(*x) {
                    let dxhat = g * val(*gamma);
                    let d = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.raw_dim());
                    for (r, mut dxr) in dx.rows_mut().into_iter().enumerate() {
                        let gr = dxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / d;
                        let mean_gx = gr.dot(&xr) / d;
                        let is = inv_std[r];
                        Zip::from(&mut dxr)
                            .and(&gr)
                            .and(&xr)
                            .for_each(|o, &gv, &xv| *o = is * (gv - mean_g - xv * mean_gx));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            &Op::MeanPool(x, len) => {
                let (rows, d) = val(x).dim();
                let mut dx = Array2::zeros((rows, d));
                let inv = 1.0 / len as f64;
                for (b, mut chunk) in dx.axis_chunks_iter_mut(Axis(0), len).enumerate() {
                    let gr = g.row(b).mapv(|v| v * inv);
                    chunk.assign(&gr.broadcast((len, d)).expect("broadcast"));
                }
                accumulate(grads, x, dx);
            }
            &Op::TileRows(x, len) => {
                let (n, d) = val(x).dim();
                let mut dx = Array2::zeros((n, d));
                for (b, chunk) in g.axis_chunks_iter(Axis(0), len).enumerate() {
                    dx.row_mut(b).assign(&chunk.sum_axis(Axis(0)));
                }
                accumulate(grads, x, dx);
            }
            &Op::AddPositional(x, pos, len) => {
                if tr(x) {
                    accumulate(grads, x, g.clone());
                }
                if tr(pos) {
                    let mut dp = Array2::zeros(val(pos).raw_dim());
                    {
                        let mut head = dp.slice_mut(s![..len, ..]);
                        for chunk in g.axis_chunks_iter(Axis(0), len) {
                            head += &chunk;
                        }
                    }
                    accumulate(grads, pos, dp);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.ncols();
                let dh = d / shape.heads;
                let mut dq = Array2::zeros(qv.raw_dim());
                let mut dk = Array2::zeros(kv.raw_dim());
                let mut dv = Array2::zeros(vv.raw_dim());
                for b in 0..shape.batch {
                    let qr = b * shape.query_len..(b + 1) * shape.query_len;
                    let kr = b * shape.key_len..(b + 1) * shape.key_len;
                    for h in 0..shape.heads {
                        let cols = h * dh..(h + 1) * dh;
                        let p = &probs[b * shape.heads + h];
                        let go = g.slice(s![qr.clone(), cols.clone()]);
                        let qb = qv.slice(s![qr.clone(), cols.clone()]);
                        let kb = kv.slice(s![kr.clone(), cols.clone()]);
                        let vb = vv.slice(s![kr.clone(), cols.clone()]);
                        let dp = go.dot(&vb.t());
                        let ds = softmax_rows_backward(p, &dp) * shape.scale;
                        dv.slice_mut(s![kr.clone(), cols.clone()]).assign(&p.t().dot(&go));
                        dq.slice_mut(s![qr.clone(), cols.clone()]).assign(&ds.dot(&kb));
                        dk.slice_mut(s![kr.clone(), cols.clone()]).assign(&ds.t().dot(&qb));
                    }
                }
                // q, k and v may alias the same node (self-attention).
                if tr(*q) {
                    accumulate(grads, *q, dq);
                }
                if tr(*k) {
                    accumulate(grads, *k, dk);
                }
                if tr(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let mut dx = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    dx[[i, y]] -= 1.0;
                }
                dx *= scale;
                accumulate(grads, *logits, dx);
            }
            Op::SoftTargetKl {
                logits,
                target,
                temperature,
                probs,
            } => {
                let n = probs.nrows() as f64;
                let dx = (probs - target) * (g[[0, 0]] * temperature / n);
                accumulate(grads, *logits, dx);
            }
            &Op::SumAll(x) => {
                let gv = g[[0, 0]];
                accumulate(grads, x, Array2::from_elem(val(x).raw_dim(), gv));
            }
            &Op::MeanAll(x) => {
                let xv = val(x);
                let gv = g[[0, 0]] / xv.len() as f64;
                accumulate(grads, x, Array2::from_elem(xv.raw_dim(), gv));
            }
            &Op::RowNorm(x) => {
                let xv = val(x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for (r, mut dxr) in dx.rows_mut().into_iter().enumerate() {
                    let n = node.value[[r, 0]];
                    if n > 0.0 {
                        dxr.assign(&(&xv.row(r) * (g[[r, 0]] / n)));
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::NormalizeRows(x, eps) => {
                let xv = val(x);
                let mut dx = Array2::zeros(xv.raw_dim());
                for (r, mut dxr) in dx.rows_mut().into_iter().enumerate() {
                    let xr = xv.row(r);
                    let gr = g.row(r);
                    let n = xr.dot(&xr).sqrt();
                    let c = n + eps;
                    dxr.assign(&(&gr / c));
                    if n > 0.0 {
                        let coef = gr.dot(&xr) / (n * c * c);
                        dxr.scaled_add(-coef, &xr);
                    }
                }
                accumulate(grads, x, dx);
            }
            &Op::Diag(x) => {
                let mut dx = Array2::zeros(val(x).raw_dim());
                for i in 0..g.nrows() {
                    dx[[i, i]] = g[[i, 0]];
                }
                accumulate(grads, x, dx);
            }
            &Op::Column(x, j) => {
                let mut dx = Array2::zeros(val(x).raw_dim());
                dx.column_mut(j).assign(&g.column(0));
                accumulate(grads, x, dx);
            }
            &Op::Row(x, i) => {
                let mut dx = Array2::zeros(val(x).raw_dim());
                dx.row_mut(i).assign(&g.row(0));
                accumulate(grads, x, dx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(build(x))/dx against the tape gradient.
    fn check<F>(x0: Array2<f64>, build: F)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut tape = Tape::new();
        let x = tape.param(x0.clone());
        let loss = build(&mut tape, x);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Array2::zeros(x0.raw_dim()));
        let h = 1e-6;
        for idx in 0..x0.len() {
            let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp[[r, c]] += delta;
                let mut t = Tape::new();
                let xv = t.param(xp);
                let l = build(&mut t, xv);
                t.scalar(l)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[[r, c]];
            let denom = numeric.abs().max(a.abs()).max(1e-8);
            assert!(
                (numeric - a).abs() / denom < 1e-5 || (numeric - a).abs() < 1e-8,
                "entry ({r},{c}): numeric {numeric} vs analytic {a}"
            );
        }
    }

    #[test]
    fn elementwise_and_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(3, 4, &mut rng);
        let row = random(1, 4, &mut rng);
        let col = random(3, 1, &mut rng);
        check(random(3, 4, &mut rng), |t, x| {
            let wv = t.constant(w.clone());
            let r = t.constant(row.clone());
            let c = t.constant(col.clone());
            let a = t.mul(x, wv);
            let b = t.add_row(a, r);
            let b = t.mul_row(b, r);
            let c1 = t.sub_col(b, c);
            let c2 = t.mul_col(c1, c);
            let g = t.gelu(c2);
            let th = t.tanh(g);
            let e = t.exp(th);
            t.sum_all(e)
        });
    }

    #[test]
    fn matmul_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(5, 4, &mut rng);
        check(random(3, 4, &mut rng), |t, x| {
            let wv = t.constant(w.clone());
            let a = t.matmul_t(x, wv);
            let b = t.transpose(a);
            let c = t.matmul(b, x);
            t.mean_all(c)
        });
        let x0 = random(4, 5, &mut rng);
        check(random(3, 4, &mut rng), |t, w| {
            let x = t.constant(x0.clone());
            let a = t.matmul(w, x);
            let s = t.softmax_rows(a);
            let c = t.softmax_cols(s);
            let sq = t.mul(c, a);
            t.sum_all(sq)
        });
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gamma = random(1, 6, &mut rng);
        let beta = random(1, 6, &mut rng);
        let w = random(4, 6, &mut rng);
        check(random(4, 6, &mut rng), |t, x| {
            let g = t.constant(gamma.clone());
            let b = t.constant(beta.clone());
            let wv = t.constant(w.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let z = t.mul(y, wv);
            t.sum_all(z)
        });
        let x0 = random(4, 6, &mut rng);
        check(gamma.clone(), |t, g| {
            let x = t.constant(x0.clone());
            let b = t.constant(beta.clone());
            let wv = t.constant(w.clone());
            let y = t.layer_norm(x, g, b, 1e-5);
            let z = t.mul(y, wv);
            t.sum_all(z)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k0 = random(6, 4, &mut rng);
        let w = random(4, 4, &mut rng);
        let shape = AttentionShape {
            batch: 2,
            query_len: 2,
            key_len: 3,
            heads: 2,
            scale: 0.7,
        };
        check(random(4, 4, &mut rng), |t, q| {
            let k = t.constant(k0.clone());
            let o = t.attention(q, k, k, shape);
            let wv = t.constant(w.clone());
            let z = t.mul(o, wv);
            t.sum_all(z)
        });
        let q0 = random(4, 4, &mut rng);
        check(k0.clone(), |t, k| {
            let q = t.constant(q0.clone());
            let o = t.attention(q, k, k, shape);
            let wv = t.constant(w.clone());
            let z = t.mul(o, wv);
            t.sum_all(z)
        });
        // self-attention with all three inputs aliased
        let self_shape = AttentionShape {
            batch: 2,
            query_len: 3,
            key_len: 3,
            heads: 1,
            scale: 0.5,
        };
        check(k0, |t, x| {
            let o = t.attention(x, x, x, self_shape);
            let o2 = t.mul(o, o);
            t.sum_all(o2)
        });
    }

    #[test]
    fn sequence_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pos = random(4, 3, &mut rng);
        let w = random(6, 3, &mut rng);
        check(random(6, 3, &mut rng), |t, x| {
            let p = t.constant(pos.clone());
            let a = t.add_positional(x, p, 3);
            let pooled = t.mean_pool(a, 3);
            let tiled = t.tile_rows(pooled, 3);
            let wv = t.constant(w.clone());
            let z = t.mul(tiled, wv);
            let z = t.mul(z, a);
            t.sum_all(z)
        });
        let x0 = random(6, 3, &mut rng);
        check(pos, |t, p| {
            let x = t.constant(x0.clone());
            let a = t.add_positional(x, p, 3);
            let a2 = t.mul(a, a);
            t.sum_all(a2)
        });
    }

    #[test]
    fn losses_and_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let labels = vec![0, 2, 1];
        check(random(3, 4, &mut rng), |t, x| t.cross_entropy(x, &labels));
        let target = softmax_rows(random(3, 4, &mut rng).view());
        check(random(3, 4, &mut rng), |t, x| t.soft_target_kl(x, target.clone(), 2.0));
        check(random(3, 4, &mut rng), |t, x| {
            let n = t.row_norm(x);
            let u = t.normalize_rows(x, 1e-12);
            let s = t.matmul_t(u, x);
            let d = t.diag(s);
            let c = t.column(s, 1);
            let r = t.row(s, 2);
            let a = t.sum_all(n);
            let b = t.sum_all(d);
            let c = t.sum_all(c);
            let r = t.sum_all(r);
            let ab = t.add(a, b);
            let cr = t.add(c, r);
            t.add(ab, cr)
        });
    }

    #[test]
    fn scale_by_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = random(3, 2, &mut rng);
        check(Array2::from_elem((1, 1), 0.7), |t, s| {
            let x = t.constant(x0.clone());
            let y = t.scale_by(x, s);
            let y = t.mul(y, y);
            t.sum_all(y)
        });
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(Array2::ones((2, 2)));
        let p = t.param(Array2::ones((2, 2)));
        let y = t.mul(c, p);
        let l = t.sum_all(y);
        let g = t.backward(l);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &Array2::<f64>::ones((2, 2)));
    }
}
