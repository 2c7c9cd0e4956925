//! Baseline node-embedding layers on top of the trace.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Trace, Var};
use crate::error::{dim_err, Error, Result};
use crate::graph::Graph;
use crate::sparse::{Segments, SparseMatrix};
use crate::tensor::Tensor;

/// Named parameter tensors, kept in sorted name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, trace: &mut Trace) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), trace.param(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Parameter names mapped to their leaves on one trace.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients by parameter name; unreached parameters get zeros.
    pub fn collect(&self, trace: &Trace, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, trace.value(v))))
            .collect()
    }
}

/// Uniform Glorot init `U(−a, a)`, `a = √(6 / (fan_in + fan_out))`.
pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Inverted dropout: keeps each entry with probability `1 − p` and rescales by
/// `1/(1 − p)`. `None` or `p == 0` is the identity.
pub fn dropout(trace: &mut Trace, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    if p >= 1.0 {
        return Err(Error::Config(format!("dropout {p} must be < 1")));
    }
    let v = trace.value(x);
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..v.len())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    let m = trace.constant(Tensor::from_vec(v.rows(), v.cols(), mask));
    trace.hadamard(x, m)
}

/// Constant graph operands shared by every layer of a forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub num_nodes: usize,
    /// `M = D̃^{-1/2} Ã D̃^{-1/2}`; symmetric, so it is its own transpose.
    pub gcn: Arc<SparseMatrix>,
    /// Closed neighbourhoods, self first, for GAT attention.
    pub neighborhoods: Arc<Segments>,
}

impl GraphContext {
    pub fn new(g: &Graph) -> Self {
        Self {
            num_nodes: g.num_nodes(),
            gcn: Arc::new(g.gcn_operator()),
            neighborhoods: Arc::new(g.closed_neighborhoods()),
        }
    }

    /// `M · x`.
    pub fn aggregate(&self, trace: &mut Trace, x: Var) -> Result<Var> {
        trace.spmm_with_transpose(&self.gcn, &self.gcn, x)
    }
}

fn check_rows(trace: &Trace, x: Var, n: usize, op: &'static str) -> Result<()> {
    let r = trace.value(x).rows();
    if r != n {
        return Err(dim_err(op, format!("{r} rows for {n} nodes")));
    }
    Ok(())
}

fn maybe_bias(trace: &mut Trace, x: Var, bias: Option<Var>) -> Result<Var> {
    match bias {
        Some(b) => trace.add_row(x, b),
        None => Ok(x),
    }
}

/// `σ(M H W + b)`, with `σ = relu` when `activate`.
pub fn gcn_forward(
    trace: &mut Trace,
    h: Var,
    ctx: &GraphContext,
    w: Var,
    bias: Option<Var>,
    activate: bool,
) -> Result<Var> {
    check_rows(trace, h, ctx.num_nodes, "gcn_forward")?;
    let hw = trace.matmul(h, w)?;
    let agg = ctx.aggregate(trace, hw)?;
    let out = maybe_bias(trace, agg, bias)?;
    Ok(if activate { trace.relu(out) } else { out })
}

/// `M^k X W`: `k` propagation steps, then one linear map.
pub fn sgc_forward(trace: &mut Trace, x: Var, ctx: &GraphContext, k: usize, w: Var) -> Result<Var> {
    if k == 0 {
        return Err(Error::Config("sgc needs k >= 1".into()));
    }
    check_rows(trace, x, ctx.num_nodes, "sgc_forward")?;
    let mut cur = x;
    for _ in 0..k {
        cur = ctx.aggregate(trace, cur)?;
    }
    trace.matmul(cur, w)
}

/// `σ(H W + b)` with no aggregation.
pub fn mlp_forward(trace: &mut Trace, h: Var, w: Var, bias: Option<Var>, activate: bool) -> Result<Var> {
    let hw = trace.matmul(h, w)?;
    let out = maybe_bias(trace, hw, bias)?;
    Ok(if activate { trace.relu(out) } else { out })
}

/// Per-head GAT parameters: `w` is `d_in × d_head`, `a_dst`/`a_src` are `d_head × 1`.
#[derive(Clone, Copy, Debug)]
pub struct GatHead {
    pub w: Var,
    pub a_dst: Var,
    pub a_src: Var,
}

/// Output of a GAT layer with the per-head attention columns (segment order).
#[derive(Clone, Debug)]
pub struct GatOutput {
    pub h: Var,
    pub attention: Vec<Var>,
}

pub const GAT_SLOPE: f64 = 0.2;

/// Graph attention over closed neighbourhoods. Heads are concatenated, or
/// averaged when `concat` is false.
pub fn gat_forward(
    trace: &mut Trace,
    h: Var,
    ctx: &GraphContext,
    heads: &[GatHead],
    concat: bool,
    activate: bool,
) -> Result<GatOutput> {
    if heads.is_empty() {
        return Err(Error::Config("gat needs at least one head".into()));
    }
    check_rows(trace, h, ctx.num_nodes, "gat_forward")?;
    let seg = &ctx.neighborhoods;
    let mut outs = Vec::with_capacity(heads.len());
    let mut attention = Vec::with_capacity(heads.len());
    for hd in heads {
        let wh = trace.matmul(h, hd.w)?;
        let e_dst = trace.matmul(wh, hd.a_dst)?;
        let e_src = trace.matmul(wh, hd.a_src)?;
        let logits = trace.pair_add(e_dst, e_src, seg)?;
        let logits = trace.leaky_relu(logits, GAT_SLOPE);
        let alpha = trace.segment_softmax(logits, seg)?;
        attention.push(alpha);
        outs.push(trace.segment_weighted_sum(alpha, wh, seg)?);
    }
    let mut out = if concat {
        trace.concat_cols(&outs)?
    } else {
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = trace.add(acc, o)?;
        }
        trace.scale(acc, 1.0 / outs.len() as f64)
    };
    if activate {
        out = trace.relu(out);
    }
    Ok(GatOutput { h: out, attention })
}

/// Concatenates per-layer outputs and projects with `w` (`L·d × d`).
pub fn jk_concat(trace: &mut Trace, layers: &[Var], w: Var) -> Result<Var> {
    let cat = trace.concat_cols(layers)?;
    trace.matmul(cat, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gcn_k2_identity() {
        let g = Graph::from_edges(&[(0, 1)]).unwrap();
        let ctx = GraphContext::new(&g);
        let mut t = Trace::new();
        let h = t.constant(Tensor::eye(2));
        let w = t.constant(Tensor::eye(2));
        let out = gcn_forward(&mut t, h, &ctx, w, None, false).unwrap();
        assert_eq!(t.value(out), &Tensor::full(2, 2, 0.5));
    }

    #[test]
    fn gcn_rejects_wrong_rows() {
        let g = Graph::from_edges(&[(0, 1)]).unwrap();
        let ctx = GraphContext::new(&g);
        let mut t = Trace::new();
        let h = t.constant(Tensor::eye(3));
        let w = t.constant(Tensor::eye(3));
        assert!(gcn_forward(&mut t, h, &ctx, w, None, false).is_err());
    }

    #[test]
    fn sgc_k2_two_steps() {
        let g = Graph::from_edges(&[(0, 1), (1, 2)]).unwrap();
        let ctx = GraphContext::new(&g);
        let mut t = Trace::new();
        let x = t.constant(Tensor::eye(3));
        let w = t.constant(Tensor::eye(3));
        let s = sgc_forward(&mut t, x, &ctx, 2, w).unwrap();
        let m = g.gcn_operator().to_dense();
        let want = m.matmul(&m).unwrap();
        assert!(t.value(s).max_abs_diff(&want) < 1e-15);
        assert!(sgc_forward(&mut t, x, &ctx, 0, w).is_err());
    }

    #[test]
    fn mlp_identity_and_zero() {
        let mut t = Trace::new();
        let x = Tensor::from_vec(2, 2, vec![1.0, -2.0, 3.0, 4.0]);
        let h = t.constant(x.clone());
        let i = t.constant(Tensor::eye(2));
        let z = t.constant(Tensor::zeros(2, 2));
        let out = mlp_forward(&mut t, h, i, None, false).unwrap();
        assert_eq!(t.value(out), &x);
        let out = mlp_forward(&mut t, h, z, None, false).unwrap();
        assert_eq!(t.value(out), &Tensor::zeros(2, 2));
    }

    #[test]
    fn gat_uniform_on_identical_rows() {
        let g = Graph::from_edges(&[(0, 1), (0, 2), (0, 3)]).unwrap();
        let ctx = GraphContext::new(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Trace::new();
        let h = t.constant(Tensor::full(4, 3, 0.7));
        let head = GatHead {
            w: t.param(glorot(3, 2, &mut rng)),
            a_dst: t.param(glorot(2, 1, &mut rng)),
            a_src: t.param(glorot(2, 1, &mut rng)),
        };
        let out = gat_forward(&mut t, h, &ctx, &[head], true, false).unwrap();
        let a = t.value(out.attention[0]).data().to_vec();
        // Node 0 has 4 entries, the leaves 2 each.
        for &x in &a[0..4] {
            assert!((x - 0.25).abs() < 1e-12);
        }
        for &x in &a[4..] {
            assert!((x - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn jk_shape() {
        let mut t = Trace::new();
        let a = t.constant(Tensor::ones(3, 2));
        let w = t.constant(Tensor::ones(4, 2));
        let out = jk_concat(&mut t, &[a, a], w).unwrap();
        assert_eq!(t.value(out), &Tensor::full(3, 2, 4.0));
    }

    #[test]
    fn dropout_is_seeded_and_scaled() {
        let mut t = Trace::new();
        let x = t.constant(Tensor::ones(10, 10));
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = dropout(&mut t, x, 0.5, Some(&mut r1)).unwrap();
        let b = dropout(&mut t, x, 0.5, Some(&mut r2)).unwrap();
        assert_eq!(t.value(a), t.value(b));
        assert!(t.value(a).data().iter().all(|&v| v == 0.0 || v == 2.0));
        let c = dropout(&mut t, x, 0.5, None).unwrap();
        assert_eq!(c, x);
    }
}
