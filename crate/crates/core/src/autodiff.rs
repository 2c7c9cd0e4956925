//! Reverse-mode automatic differentiation over a recorded trace.
//!
//! A [`Trace`] is an append-only list of nodes. Each node holds its forward
//! value and the op that produced it. Insertion order is a topological order,
//! and [`Trace::backward`] walks the nodes strictly in reverse, accumulating
//! into each input in the op's fixed argument order. Two backward passes over
//! the same trace therefore produce bit-identical gradients.

use std::sync::Arc;

use crate::error::{dim_err, Error, Result};
use crate::par;
use crate::sparse::{Segments, SparseMatrix};
use crate::tensor::{matmul_bt_raw, matmul_raw, Tensor};

/// Handle to a node on a [`Trace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(Var),
    /// Holds the transpose of the constant left operand.
    SpMM(Arc<SparseMatrix>, Var),
    GatherRows(Var, Arc<Vec<usize>>),
    PairDot(Var, Var, Arc<Segments>),
    PairAdd(Var, Var, Arc<Segments>),
    SegmentSoftmax(Var, Arc<Segments>),
    SegmentWeightedSum(Var, Var, Arc<Segments>),
    Sum(Var),
    Mean(Var),
    Bce(Var, Arc<Vec<f64>>),
    SoftmaxXent {
        logits: Var,
        labels: Arc<Vec<usize>>,
        rows: Arc<Vec<usize>>,
        probs: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation supporting reverse-mode gradients.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    nodes: Vec<Node>,
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(dim_err(
            op,
            format!("{}x{} vs {}x{}", a.rows(), a.cols(), b.rows(), b.cols()),
        ))
    }
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out, &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(Op::Transpose(x), out, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out, &[a, b]))
    }

    /// `x + 1·bias` where `bias` is a single row broadcast over all rows of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(dim_err(
                "add_row",
                format!("bias {}x{} for {} columns", bv.rows(), bv.cols(), xv.cols()),
            ));
        }
        let n = xv.cols();
        let mut out = xv.clone();
        let b = bv.data();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o += b[i % n];
        }
        Ok(self.push(Op::AddRow(x, bias), out, &[x, bias]))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("hadamard", self.value(a), self.value(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Hadamard(a, b), out, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), out, &[x])
    }

    /// `s · x` with `s` a `1×1` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("scale_by", "scale factor must be 1x1"));
        }
        let c = self.value(s).item();
        let out = self.value(x).map(|v| v * c);
        Ok(self.push(Op::ScaleBy(x, s), out, &[x, s]))
    }

    /// Rectifier; the subgradient at exactly 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(x), out, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu(x, slope), out, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), out, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| dim_err("concat_cols", "no inputs"))?;
        let m = self.value(*first).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != m) {
            return Err(dim_err(
                "concat_cols",
                format!("row count {} vs {}", self.value(*bad).rows(), m),
            ));
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::from_vec(m, total, out);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        if start > end || end > self.value(x).cols() {
            return Err(dim_err(
                "slice_cols",
                format!("[{start},{end}) of {} columns", self.value(x).cols()),
            ));
        }
        let out = self.value(x).slice_cols(start, end);
        Ok(self.push(Op::SliceCols(x, start, end), out, &[x]))
    }

    /// Row-wise layer normalisation with learned gain and bias (`1×d` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        if gv.len() != d || bv.len() != d {
            return Err(dim_err("layer_norm", format!("gain/bias length vs d={d}")));
        }
        let m = xv.rows();
        let mut xhat = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        let (g, b) = (gv.data(), bv.data());
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::from_vec(m, d, out);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
            &[x, gain, bias],
        ))
    }

    /// Row-wise softmax restricted to `mask` (row-major, same shape as the
    /// logits). Masked entries are exactly 0. `None` means no mask.
    pub fn masked_softmax_rows(&mut self, logits: Var, mask: Option<&[bool]>) -> Result<Var> {
        let out = masked_softmax_rows(self.value(logits), mask)?;
        Ok(self.push(Op::MaskedSoftmax(logits), out, &[logits]))
    }

    /// `a · x` for a constant sparse `a`.
    pub fn spmm(&mut self, a: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        if a.cols() != self.value(x).rows() {
            return Err(dim_err(
                "spmm",
                format!("{}x{} times {} rows", a.rows(), a.cols(), self.value(x).rows()),
            ));
        }
        let out = a.mul_dense(self.value(x));
        let at = Arc::new(a.transpose());
        Ok(self.push(Op::SpMM(at, x), out, &[x]))
    }

    /// Same as [`Trace::spmm`] with a precomputed transpose.
    pub fn spmm_with_transpose(
        &mut self,
        a: &Arc<SparseMatrix>,
        at: &Arc<SparseMatrix>,
        x: Var,
    ) -> Result<Var> {
        if a.cols() != self.value(x).rows() {
            return Err(dim_err("spmm", "row mismatch"));
        }
        let out = a.mul_dense(self.value(x));
        Ok(self.push(Op::SpMM(at.clone(), x), out, &[x]))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &Arc<Vec<usize>>) -> Result<Var> {
        let n = self.value(x).rows();
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(dim_err("gather_rows", format!("row {bad} of {n}")));
        }
        let out = self.value(x).select_rows(idx);
        Ok(self.push(Op::GatherRows(x, idx.clone()), out, &[x]))
    }

    /// `out[p] = a[row(p)] · b[col(p)]` for every segment entry `p`; shape `P×1`.
    pub fn pair_dot(&mut self, a: Var, b: Var, seg: &Arc<Segments>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != seg.num_rows() || bv.rows() != seg.num_cols() || av.cols() != bv.cols() {
            return Err(dim_err("pair_dot", "operand shapes vs segments"));
        }
        let mut out = vec![0.0; seg.nnz()];
        for r in 0..seg.num_rows() {
            let ar = av.row(r);
            for p in seg.range(r) {
                let br = bv.row(seg.col_at(p));
                out[p] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let out = Tensor::from_vec(seg.nnz(), 1, out);
        Ok(self.push(Op::PairDot(a, b, seg.clone()), out, &[a, b]))
    }

    /// `out[p] = a[row(p)] + b[col(p)]` for column vectors `a`, `b`.
    pub fn pair_add(&mut self, a: Var, b: Var, seg: &Arc<Segments>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != 1 || bv.cols() != 1 || av.rows() != seg.num_rows() || bv.rows() != seg.num_cols() {
            return Err(dim_err("pair_add", "operand shapes vs segments"));
        }
        let mut out = vec![0.0; seg.nnz()];
        for r in 0..seg.num_rows() {
            for p in seg.range(r) {
                out[p] = av.data()[r] + bv.data()[seg.col_at(p)];
            }
        }
        let out = Tensor::from_vec(seg.nnz(), 1, out);
        Ok(self.push(Op::PairAdd(a, b, seg.clone()), out, &[a, b]))
    }

    /// Softmax over each segment of a `P×1` logit column. Empty segments
    /// contribute nothing.
    pub fn segment_softmax(&mut self, logits: Var, seg: &Arc<Segments>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.len() != seg.nnz() {
            return Err(dim_err("segment_softmax", "logit count vs segments"));
        }
        let out = segment_softmax(lv.data(), seg);
        let out = Tensor::from_vec(seg.nnz(), 1, out);
        Ok(self.push(Op::SegmentSoftmax(logits, seg.clone()), out, &[logits]))
    }

    /// `out[r] = Σ_{p ∈ r} w[p] · values[col(p)]`; rows with no entries are 0.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, seg: &Arc<Segments>) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if wv.len() != seg.nnz() || vv.rows() != seg.num_cols() {
            return Err(dim_err("segment_weighted_sum", "operand shapes vs segments"));
        }
        let d = vv.cols();
        let w = wv.data();
        let mut out = vec![0.0; seg.num_rows() * d];
        par::for_each_row(&mut out, d, |r, row| {
            for p in seg.range(r) {
                let src = vv.row(seg.col_at(p));
                for (o, s) in row.iter_mut().zip(src) {
                    *o += w[p] * s;
                }
            }
        });
        let out = Tensor::from_vec(seg.num_rows(), d, out);
        Ok(self.push(
            Op::SegmentWeightedSum(weights, values, seg.clone()),
            out,
            &[weights, values],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(Op::Sum(x), out, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        self.push(Op::Mean(x), out, &[x])
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, scores: Var, labels: &Arc<Vec<f64>>) -> Result<Var> {
        let s = self.value(scores);
        if s.len() != labels.len() || s.is_empty() {
            return Err(dim_err("bce", format!("{} scores, {} labels", s.len(), labels.len())));
        }
        let out = Tensor::scalar(bce_value(s.data(), labels));
        Ok(self.push(Op::Bce(scores, labels.clone()), out, &[scores]))
    }

    /// Mean softmax cross-entropy over the selected `rows` of `logits`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &Arc<Vec<usize>>, rows: &Arc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        if labels.len() != lv.rows() || rows.is_empty() {
            return Err(dim_err("softmax_xent", "labels or rows"));
        }
        if labels.iter().any(|&l| l >= c) || rows.iter().any(|&r| r >= lv.rows()) {
            return Err(dim_err("softmax_xent", "label or row index out of range"));
        }
        let mut probs = vec![0.0; rows.len() * c];
        let mut loss = 0.0;
        for (k, &r) in rows.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            for j in 0..c {
                probs[k * c + j] = (row[j] - mx).exp() / z;
            }
            loss -= row[labels[r]] - mx - z.ln();
        }
        let out = Tensor::scalar(loss / rows.len() as f64);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.clone(),
                rows: rows.clone(),
                probs,
            },
            out,
            &[logits],
        ))
    }

    /// Gradients of a scalar `loss` with respect to every upstream node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_from(loss, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `out`) back
    /// through the trace.
    pub fn backward_from(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if out.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("var {} not on trace", out.0)));
        }
        if !seed.same_shape(self.value(out)) {
            return Err(dim_err("backward", "seed shape differs from output"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let ga = matmul_bt_raw(g.data(), bv.data(), m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.wants(*b) {
                    let at = av.transpose();
                    let gb = matmul_raw(at.data(), g.data(), k, m, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::AddRow(x, bias) => {
                self.accumulate(grads, *x, g.clone());
                if self.wants(*bias) {
                    let n = g.cols();
                    let mut gb = vec![0.0; n];
                    for i in 0..g.rows() {
                        for (acc, v) in gb.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Tensor::new(shape, gb).expect("bias shape"));
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s).item();
                if self.wants(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * c));
                }
                if self.wants(*s) {
                    let dot: f64 = g.data().iter().zip(self.value(*x).data()).map(|(a, b)| a * b).sum();
                    let shape = self.value(*s).shape().to_vec();
                    self.accumulate(grads, *s, Tensor::new(shape, vec![dot]).expect("scalar"));
                }
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *x, gx);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let gx = g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { s * gv });
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        self.accumulate(grads, *p, g.slice_cols(start, start + w));
                    }
                    start += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let xv = self.value(*x);
                let (m, n) = (xv.rows(), xv.cols());
                let w = end - start;
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + end].copy_from_slice(&g.data()[i * w..(i + 1) * w]);
                }
                self.accumulate(grads, *x, Tensor::from_vec(m, n, gx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = g.cols();
                let m = g.rows();
                let gd = g.data();
                let gain_v = self.value(*gain).data();
                if self.wants(*x) {
                    let mut gx = vec![0.0; m * d];
                    for i in 0..m {
                        let gr = &gd[i * d..(i + 1) * d];
                        let xh = &xhat[i * d..(i + 1) * d];
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gain_v[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh[j];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gain_v[j];
                            gx[i * d + j] = inv_std[i] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(m, d, gx));
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] += gd[i * d + j] * xhat[i * d + j];
                            gb[j] += gd[i * d + j];
                        }
                    }
                    let gs = self.value(*gain).shape().to_vec();
                    let bs = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *gain, Tensor::new(gs, gg).expect("gain"));
                    self.accumulate(grads, *bias, Tensor::new(bs, gb).expect("bias"));
                }
            }
            Op::MaskedSoftmax(x) => {
                let y = &node.value;
                let n = y.cols();
                let mut gx = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.rows(), n, gx));
            }
            Op::SpMM(at, x) => {
                self.accumulate(grads, *x, at.mul_dense(g));
            }
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut gx = vec![0.0; xv.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in gx[i * d..(i + 1) * d].iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(xv.rows(), d, gx));
            }
            Op::PairDot(a, b, seg) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = av.cols();
                let gd = g.data();
                if self.wants(*a) {
                    let mut ga = vec![0.0; av.len()];
                    par::for_each_row(&mut ga, d, |r, row| {
                        for p in seg.range(r) {
                            let br = bv.row(seg.col_at(p));
                            for (o, y) in row.iter_mut().zip(br) {
                                *o += gd[p] * y;
                            }
                        }
                    });
                    self.accumulate(grads, *a, Tensor::from_vec(av.rows(), d, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; bv.len()];
                    for r in 0..seg.num_rows() {
                        let ar = av.row(r);
                        for p in seg.range(r) {
                            let c = seg.col_at(p);
                            for (o, x) in gb[c * d..(c + 1) * d].iter_mut().zip(ar) {
                                *o += gd[p] * x;
                            }
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(bv.rows(), d, gb));
                }
            }
            Op::PairAdd(a, b, seg) => {
                let gd = g.data();
                if self.wants(*a) {
                    let mut ga = vec![0.0; seg.num_rows()];
                    for (r, o) in ga.iter_mut().enumerate() {
                        *o = seg.range(r).map(|p| gd[p]).sum();
                    }
                    self.accumulate(grads, *a, Tensor::from_vec(seg.num_rows(), 1, ga));
                }
                if self.wants(*b) {
                    let mut gb = vec![0.0; seg.num_cols()];
                    for (p, &c) in seg.cols().iter().enumerate() {
                        gb[c] += gd[p];
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(seg.num_cols(), 1, gb));
                }
            }
            Op::SegmentSoftmax(x, seg) => {
                let y = node.value.data();
                let gd = g.data();
                let mut gx = vec![0.0; y.len()];
                for r in 0..seg.num_rows() {
                    let span = seg.range(r);
                    let dot: f64 = span.clone().map(|p| y[p] * gd[p]).sum();
                    for p in span {
                        gx[p] = y[p] * (gd[p] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.len(), 1, gx));
            }
            Op::SegmentWeightedSum(w, values, seg) => {
                let (wv, vv) = (self.value(*w), self.value(*values));
                let d = vv.cols();
                if self.wants(*w) {
                    let mut gw = vec![0.0; wv.len()];
                    for r in 0..seg.num_rows() {
                        let gr = g.row(r);
                        for p in seg.range(r) {
                            gw[p] = gr.iter().zip(vv.row(seg.col_at(p))).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.accumulate(grads, *w, Tensor::from_vec(wv.len(), 1, gw));
                }
                if self.wants(*values) {
                    let wd = wv.data();
                    let mut gv = vec![0.0; vv.len()];
                    for r in 0..seg.num_rows() {
                        let gr = g.row(r);
                        for p in seg.range(r) {
                            let c = seg.col_at(p);
                            for (o, x) in gv[c * d..(c + 1) * d].iter_mut().zip(gr) {
                                *o += wd[p] * x;
                            }
                        }
                    }
                    self.accumulate(grads, *values, Tensor::from_vec(vv.rows(), d, gv));
                }
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                let c = g.item();
                self.accumulate(grads, *x, Tensor::full(xv.rows(), xv.cols(), c));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let c = g.item() / xv.len().max(1) as f64;
                self.accumulate(grads, *x, Tensor::full(xv.rows(), xv.cols(), c));
            }
            Op::Bce(s, labels) => {
                let sv = self.value(*s);
                let n = sv.len() as f64;
                let c = g.item();
                let gs: Vec<f64> = sv
                    .data()
                    .iter()
                    .zip(labels.iter())
                    .map(|(&p, &y)| {
                        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        -c * (y / p - (1.0 - y) / (1.0 - p)) / n
                    })
                    .collect();
                self.accumulate(grads, *s, Tensor::from_vec(sv.rows(), sv.cols(), gs));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                rows,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g.item() / rows.len() as f64;
                let mut gl = vec![0.0; lv.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == labels[r] { 1.0 } else { 0.0 };
                        gl[r * c + j] += scale * (probs[k * c + j] - target);
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(lv.rows(), c, gl));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_value(scores: &[f64], labels: &[f64]) -> f64 {
    let n = scores.len() as f64;
    scores
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Standalone masked row softmax on plain tensors.
pub fn masked_softmax_rows(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let (m, n) = (logits.rows(), logits.cols());
    if let Some(mask) = mask {
        if mask.len() != m * n {
            return Err(dim_err("masked_softmax_rows", "mask shape differs from logits"));
        }
    }
    let mut out = vec![0.0; m * n];
    if mask.is_none() {
        if n == 0 && m > 0 {
            return Err(Error::DegenerateRow { row: 0 });
        }
        for (row, o) in logits.data().chunks(n.max(1)).zip(out.chunks_mut(n.max(1))) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (x, e) in row.iter().zip(o.iter_mut()) {
                *e = (x - mx).exp();
                z += *e;
            }
            let inv = 1.0 / z;
            for e in o.iter_mut() {
                *e *= inv;
            }
        }
        return Ok(Tensor::from_vec(m, n, out));
    }
    let allowed = |i: usize, j: usize| mask.is_none_or(|mk| mk[i * n + j]);
    for i in 0..m {
        let row = logits.row(i);
        let mx = (0..n)
            .filter(|&j| allowed(i, j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: i });
        }
        let mut z = 0.0;
        for j in 0..n {
            if allowed(i, j) {
                let e = (row[j] - mx).exp();
                out[i * n + j] = e;
                z += e;
            }
        }
        for v in &mut out[i * n..(i + 1) * n] {
            *v /= z;
        }
    }
    Ok(Tensor::from_vec(m, n, out))
}

pub(crate) fn segment_softmax(logits: &[f64], seg: &Segments) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for r in 0..seg.num_rows() {
        let span = seg.range(r);
        if span.is_empty() {
            continue;
        }
        let mx = span.clone().map(|p| logits[p]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for p in span.clone() {
            let e = (logits[p] - mx).exp();
            out[p] = e;
            z += e;
        }
        for p in span {
            out[p] /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_softmax_row() {
        let t = masked_softmax_rows(&Tensor::zeros(1, 3), None).unwrap();
        for v in t.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_entry_excluded() {
        let (a, b, c) = (0.3, 5.0, -1.2);
        let t = Tensor::from_vec(1, 3, vec![a, b, c]);
        let s = masked_softmax_rows(&t, Some(&[true, false, true])).unwrap();
        let sigma = a.exp() / (a.exp() + c.exp());
        assert_eq!(s.data()[1], 0.0);
        assert!((s.data()[0] - sigma).abs() < 1e-15);
        assert!((s.data()[2] - (1.0 - sigma)).abs() < 1e-15);
    }

    #[test]
    fn softmax_of_one_two_three() {
        let t = Tensor::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let s = masked_softmax_rows(&t, None).unwrap();
        let want = [0.09003, 0.24473, 0.66524];
        for (g, w) in s.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-5);
        }
    }

    #[test]
    fn degenerate_row_rejected() {
        let t = Tensor::zeros(2, 2);
        let err = masked_softmax_rows(&t, Some(&[true, false, false, false])).unwrap_err();
        assert!(matches!(err, Error::DegenerateRow { row: 1 }));
    }

    #[test]
    fn sum_gives_ones() {
        let mut tr = Trace::new();
        let x = tr.param(Tensor::from_vec(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let l = tr.sum(x);
        let g = tr.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(2, 3));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut tr = Trace::new();
        let xv = Tensor::from_vec(2, 2, vec![1.5, -2.0, 0.25, 4.0]);
        let x = tr.param(xv.clone());
        let sq = tr.hadamard(x, x).unwrap();
        let s = tr.sum(sq);
        let l = tr.scale(s, 0.5);
        let g = tr.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &xv);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tr = Trace::new();
        let x = tr.param(Tensor::zeros(2, 2));
        assert!(matches!(tr.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_sign_cases() {
        let mut tr = Trace::new();
        let x = tr.param(Tensor::from_vec(1, 3, vec![-1.0, 0.0, 2.0]));
        let y = tr.relu(x);
        assert_eq!(tr.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tr.sum(y);
        let g = tr.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_shape_law() {
        let mut tr = Trace::new();
        let a = tr.constant(Tensor::zeros(2, 3));
        let b = tr.constant(Tensor::zeros(2, 5));
        let c = tr.concat_cols(&[a, b]).unwrap();
        assert_eq!(tr.value(c).shape(), &[2, 8]);
        let d = tr.constant(Tensor::zeros(3, 1));
        assert!(tr.concat_cols(&[a, d]).is_err());
    }

    #[test]
    fn constant_row_layer_norm_is_zero() {
        let mut tr = Trace::new();
        let x = tr.constant(Tensor::full(1, 4, 3.0));
        let g = tr.constant(Tensor::ones(1, 4));
        let b = tr.constant(Tensor::zeros(1, 4));
        let y = tr.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tr.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn normalised_row_unchanged() {
        let mut tr = Trace::new();
        let x = tr.constant(Tensor::from_vec(1, 2, vec![1.0, -1.0]));
        let g = tr.constant(Tensor::ones(1, 2));
        let b = tr.constant(Tensor::zeros(1, 2));
        let y = tr.layer_norm(x, g, b, 1e-5).unwrap();
        // eps inside the root shifts the result by ~5e-6.
        assert!(tr.value(y).max_abs_diff(&Tensor::from_vec(1, 2, vec![1.0, -1.0])) < 1e-5);
    }

    #[test]
    fn segment_softmax_skips_empty_rows() {
        let seg = Segments::from_lists(&[vec![0, 1], vec![], vec![2]], 3);
        let out = segment_softmax(&[0.0, 0.0, 7.0], &seg);
        assert_eq!(out, vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn backward_is_bit_identical() {
        let mut tr = Trace::new();
        let a = tr.param(Tensor::from_vec(2, 2, vec![0.3, -1.1, 2.2, 0.7]));
        let b = tr.param(Tensor::from_vec(2, 2, vec![1.3, 0.1, -0.2, 0.9]));
        let c = tr.matmul(a, b).unwrap();
        let d = tr.sigmoid(c);
        let e = tr.hadamard(d, c).unwrap();
        let l = tr.sum(e);
        let g1 = tr.backward(l).unwrap();
        let g2 = tr.backward(l).unwrap();
        assert_eq!(g1.get(a), g2.get(a));
        assert_eq!(g1.get(b), g2.get(b));
    }
}
