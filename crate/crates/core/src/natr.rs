//! Node Attribute Transformer: attribute-token encoder and the decoder that
//! re-weights each node's own attribute embeddings with node-level queries.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Trace, Var};
use crate::data::AttributeOperands;
use crate::error::{Error, Result};
use crate::layers::{self, glorot, Bound, GatHead, GraphContext, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeModuleKind {
    Gcn,
    Gat,
    Mlp,
}

impl fmt::Display for NodeModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gcn => "gcn",
            Self::Gat => "gat",
            Self::Mlp => "mlp",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    SelfAttn,
    /// Position-wise feed-forward blocks only; no mixing between attributes.
    Mlp,
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SelfAttn => "self-attn",
            Self::Mlp => "mlp",
        })
    }
}

/// How `H^(m)` and `O^(m)` are merged before the first normalisation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LambdaMode {
    /// `Norm(H + O)`.
    None,
    Fixed(f64),
    /// `λ = sigmoid(θ)` with `θ` trained, one per decoder layer.
    Learnable,
}

impl fmt::Display for LambdaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Fixed(l) => write!(f, "{l}"),
            Self::Learnable => f.write_str("learnable"),
        }
    }
}

impl FromStr for LambdaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "learnable" => Ok(Self::Learnable),
            other => {
                let l: f64 = other
                    .parse()
                    .map_err(|_| Error::Config(format!("bad lambda `{other}`")))?;
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::Config(format!("lambda {l} outside [0,1]")));
                }
                Ok(Self::Fixed(l))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NatrConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub d: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    pub node_module: NodeModuleKind,
    pub encoder: EncoderKind,
    pub lambda: LambdaMode,
    pub plugin: bool,
    pub aux_loss: bool,
    /// Heads of a GAT node module.
    pub gat_heads: usize,
}

impl Default for NatrConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 4,
            d: 128,
            d_ffn: 512,
            dropout: 0.5,
            node_module: NodeModuleKind::Gcn,
            encoder: EncoderKind::SelfAttn,
            lambda: LambdaMode::None,
            plugin: false,
            aux_loss: true,
            gat_heads: 1,
        }
    }
}

impl NatrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d = {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.gat_heads == 0 || !self.d.is_multiple_of(self.gat_heads) {
            return Err(Error::Config("d not divisible by gat heads".into()));
        }
        if self.decoder_layers == 0 {
            return Err(Error::Config("need at least one decoder layer".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if let LambdaMode::Fixed(l) = self.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda {l} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Attention temperature `1/√d_k` with `d_k` the per-head width.
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.head_dim() as f64).sqrt()
    }
}

fn init_ffn(p: &mut ParamStore, prefix: &str, d: usize, d_ffn: usize, rng: &mut ChaCha8Rng) {
    p.insert(format!("{prefix}.ffn.w1"), glorot(d, d_ffn, rng));
    p.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(1, d_ffn));
    p.insert(format!("{prefix}.ffn.w2"), glorot(d_ffn, d, rng));
    p.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(1, d));
}

fn init_norm(p: &mut ParamStore, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Tensor::ones(1, d));
    p.insert(format!("{name}.b"), Tensor::zeros(1, d));
}

fn init_attn(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert(format!("{prefix}.{w}"), glorot(d, d, rng));
    }
}

/// Adds the encoder, decoder and embedding parameters to `p`.
///
/// `H^(0) = X W^(0)` (`natr.w0`) and the tokens `Z^(0)` (`natr.z0`) are
/// separate parameter sets.
pub fn init_params(cfg: &NatrConfig, num_attributes: usize, p: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let d = cfg.d;
    p.insert("natr.w0", glorot(num_attributes, d, rng));
    p.insert("natr.z0", glorot(num_attributes, d, rng));
    for n in 0..cfg.encoder_layers {
        let pre = format!("enc.{n}");
        if cfg.encoder == EncoderKind::SelfAttn {
            init_attn(p, &pre, d, rng);
            init_norm(p, &format!("{pre}.ln1"), d);
        }
        init_ffn(p, &pre, d, cfg.d_ffn, rng);
        init_norm(p, &format!("{pre}.ln2"), d);
    }
    for m in 0..cfg.decoder_layers {
        let pre = format!("dec.{m}");
        if !cfg.plugin {
            match cfg.node_module {
                NodeModuleKind::Gcn | NodeModuleKind::Mlp => {
                    p.insert(format!("{pre}.node.w"), glorot(d, d, rng));
                    p.insert(format!("{pre}.node.b"), Tensor::zeros(1, d));
                }
                NodeModuleKind::Gat => {
                    let dh = d / cfg.gat_heads;
                    for h in 0..cfg.gat_heads {
                        p.insert(format!("{pre}.node.h{h}.w"), glorot(d, dh, rng));
                        p.insert(format!("{pre}.node.h{h}.a_dst"), glorot(dh, 1, rng));
                        p.insert(format!("{pre}.node.h{h}.a_src"), glorot(dh, 1, rng));
                    }
                }
            }
        }
        init_attn(p, &pre, d, rng);
        init_norm(p, &format!("{pre}.ln1"), d);
        init_ffn(p, &pre, d, cfg.d_ffn, rng);
        init_norm(p, &format!("{pre}.ln2"), d);
        if cfg.lambda == LambdaMode::Learnable {
            p.insert(format!("{pre}.lambda"), Tensor::scalar(0.0));
        }
    }
}

fn norm(trace: &mut Trace, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let g = b.var(&format!("{name}.g"))?;
    let bias = b.var(&format!("{name}.b"))?;
    trace.layer_norm(x, g, bias, LN_EPS)
}

fn ffn(trace: &mut Trace, b: &Bound, pre: &str, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let h = trace.matmul(x, b.var(&format!("{pre}.ffn.w1"))?)?;
    let h = trace.add_row(h, b.var(&format!("{pre}.ffn.b1"))?)?;
    let h = trace.relu(h);
    let h = layers::dropout(trace, h, p, rng)?;
    let h = trace.matmul(h, b.var(&format!("{pre}.ffn.w2"))?)?;
    trace.add_row(h, b.var(&format!("{pre}.ffn.b2"))?)
}

/// Encoder output with the per-layer, per-head dense attention matrices.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub z: Var,
    pub attention: Vec<Vec<Var>>,
}

/// `Z = Z^(N) + Z^(0)`; with zero layers the output is `Z^(0)` itself.
pub fn encode_attributes(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    z0: Var,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<EncoderOutput> {
    if trace.value(z0).rows() == 0 {
        return Err(Error::Contract("encoder needs at least one attribute".into()));
    }
    let mut z = z0;
    let mut attention = Vec::new();
    let dh = cfg.head_dim();
    for n in 0..cfg.encoder_layers {
        let pre = format!("enc.{n}");
        if cfg.encoder == EncoderKind::SelfAttn {
            let qk_in = trace.add(z, z0)?;
            let q = trace.matmul(qk_in, b.var(&format!("{pre}.wq"))?)?;
            let k = trace.matmul(qk_in, b.var(&format!("{pre}.wk"))?)?;
            let v = trace.matmul(z, b.var(&format!("{pre}.wv"))?)?;
            let mut heads = Vec::with_capacity(cfg.heads);
            let mut maps = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let (s, e) = (h * dh, (h + 1) * dh);
                let qh = trace.slice_cols(q, s, e)?;
                let kh = trace.slice_cols(k, s, e)?;
                let vh = trace.slice_cols(v, s, e)?;
                let kt = trace.transpose(kh);
                let logits = trace.matmul(qh, kt)?;
                let logits = trace.scale(logits, cfg.attn_scale());
                let a = trace.masked_softmax_rows(logits, None)?;
                maps.push(a);
                heads.push(trace.matmul(a, vh)?);
            }
            let cat = trace.concat_cols(&heads)?;
            let o = trace.matmul(cat, b.var(&format!("{pre}.wo"))?)?;
            let o = layers::dropout(trace, o, cfg.dropout, rng.as_deref_mut())?;
            let res = trace.add(z, o)?;
            z = norm(trace, b, &format!("{pre}.ln1"), res)?;
            attention.push(maps);
        }
        let f = ffn(trace, b, &pre, z, cfg.dropout, rng.as_deref_mut())?;
        let res = trace.add(f, z)?;
        z = norm(trace, b, &format!("{pre}.ln2"), res)?;
    }
    let z = if cfg.encoder_layers == 0 { z0 } else { trace.add(z, z0)? };
    Ok(EncoderOutput { z, attention })
}

/// `Norm((1−λ)H + λO)`, or `Norm(H + O)` when no λ is configured.
pub fn lambda_mix(trace: &mut Trace, b: &Bound, pre: &str, mode: LambdaMode, h: Var, o: Var) -> Result<Var> {
    let mixed = match mode {
        LambdaMode::None => trace.add(h, o)?,
        LambdaMode::Fixed(l) => {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("lambda {l} outside [0,1]")));
            }
            let a = trace.scale(h, 1.0 - l);
            let c = trace.scale(o, l);
            trace.add(a, c)?
        }
        LambdaMode::Learnable => {
            let theta = b.var(&format!("{pre}.lambda"))?;
            let lam = trace.sigmoid(theta);
            let lo = trace.scale_by(o, lam)?;
            let lh = trace.scale_by(h, lam)?;
            let h_part = trace.sub(h, lh)?;
            trace.add(h_part, lo)?
        }
    };
    norm(trace, b, &format!("{pre}.ln1"), mixed)
}

/// Constant operands of the decoder's masked cross-attention.
#[derive(Clone, Debug)]
pub struct DecoderInputs<'a> {
    pub graph: &'a GraphContext,
    pub attrs: &'a AttributeOperands,
    /// Additive logit offsets in segment order (magnitude mode).
    pub offsets: Option<Arc<Tensor>>,
}

/// One decoder layer's recorded values.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub h_node: Var,
    pub mixture: Var,
    pub out: Var,
    /// `P × 1` attention columns in attribute-segment order, one per head.
    pub attention: Vec<Var>,
}

fn node_module(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    pre: &str,
    ctx: &GraphContext,
    h: Var,
) -> Result<Var> {
    match cfg.node_module {
        NodeModuleKind::Gcn => {
            let w = b.var(&format!("{pre}.node.w"))?;
            let bias = b.var(&format!("{pre}.node.b"))?;
            layers::gcn_forward(trace, h, ctx, w, Some(bias), true)
        }
        NodeModuleKind::Mlp => {
            let w = b.var(&format!("{pre}.node.w"))?;
            let bias = b.var(&format!("{pre}.node.b"))?;
            layers::mlp_forward(trace, h, w, Some(bias), true)
        }
        NodeModuleKind::Gat => {
            let heads = (0..cfg.gat_heads)
                .map(|i| {
                    Ok(GatHead {
                        w: b.var(&format!("{pre}.node.h{i}.w"))?,
                        a_dst: b.var(&format!("{pre}.node.h{i}.a_dst"))?,
                        a_src: b.var(&format!("{pre}.node.h{i}.a_src"))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(layers::gat_forward(trace, h, ctx, &heads, true, true)?.h)
        }
    }
}

/// Masked multi-head cross-attention of node queries over each node's own
/// attribute tokens. Nodes with no attributes get a zero row.
fn cross_attention(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    pre: &str,
    inputs: &DecoderInputs<'_>,
    q_in: Var,
    z: Var,
) -> Result<(Var, Vec<Var>)> {
    let seg = &inputs.attrs.segments;
    let q = trace.matmul(q_in, b.var(&format!("{pre}.wq"))?)?;
    let k = trace.matmul(z, b.var(&format!("{pre}.wk"))?)?;
    let v = trace.matmul(z, b.var(&format!("{pre}.wv"))?)?;
    let offsets = inputs.offsets.as_ref().map(|t| trace.constant((**t).clone()));
    let dh = cfg.head_dim();
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut attn = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = trace.slice_cols(q, s, e)?;
        let kh = trace.slice_cols(k, s, e)?;
        let vh = trace.slice_cols(v, s, e)?;
        let logits = trace.pair_dot(qh, kh, seg)?;
        let mut logits = trace.scale(logits, cfg.attn_scale());
        if let Some(off) = offsets {
            logits = trace.add(logits, off)?;
        }
        let a = trace.segment_softmax(logits, seg)?;
        attn.push(a);
        heads.push(trace.segment_weighted_sum(a, vh, seg)?);
    }
    let cat = trace.concat_cols(&heads)?;
    let o = trace.matmul(cat, b.var(&format!("{pre}.wo"))?)?;
    Ok((o, attn))
}

/// Decoder layer `m` (0-based). In nested mode the node module runs on
/// `h_prev`; in plug-in mode `external` supplies `H^(m)` directly and the
/// residual path carries `h_prev`.
#[allow(clippy::too_many_arguments)]
pub fn decode_layer(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    m: usize,
    inputs: &DecoderInputs<'_>,
    h_prev: Var,
    h0: Var,
    z: Var,
    external: Option<Var>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<DecoderLayer> {
    let pre = format!("dec.{m}");
    let (h_node, residual) = match external {
        Some(ext) => (ext, h_prev),
        None => {
            let x = layers::dropout(trace, h_prev, cfg.dropout, rng.as_deref_mut())?;
            let h = node_module(trace, b, cfg, &pre, inputs.graph, x)?;
            (h, h)
        }
    };
    let q_in = trace.add(h_node, h0)?;
    let (o, attention) = cross_attention(trace, b, cfg, &pre, inputs, q_in, z)?;
    let g = lambda_mix(trace, b, &pre, cfg.lambda, residual, o)?;
    let f = ffn(trace, b, &pre, g, cfg.dropout, rng)?;
    let res = trace.add(f, g)?;
    let out = norm(trace, b, &format!("{pre}.ln2"), res)?;
    Ok(DecoderLayer {
        h_node,
        mixture: o,
        out,
        attention,
    })
}

/// Everything recorded by a full forward pass.
#[derive(Clone, Debug)]
pub struct NatrOutput {
    pub h0: Var,
    pub encoder: EncoderOutput,
    /// One entry per decoder layer; the last `out` is the final representation.
    pub layers: Vec<DecoderLayer>,
}

impl NatrOutput {
    pub fn final_out(&self) -> Var {
        self.layers.last().expect("at least one decoder layer").out
    }

    /// `H̃^(m)` for every decoder layer, final included.
    pub fn outputs(&self) -> Vec<Var> {
        self.layers.iter().map(|l| l.out).collect()
    }

    pub fn mixtures(&self) -> Vec<Var> {
        self.layers.iter().map(|l| l.mixture).collect()
    }

    /// Attention per incidence averaged over heads and decoder layers, split
    /// per node in attribute order.
    pub fn mean_attention(&self, trace: &Trace, attrs: &AttributeOperands) -> Vec<Vec<f64>> {
        let seg = &attrs.segments;
        let mut acc = vec![0.0; seg.nnz()];
        let mut count = 0usize;
        for l in &self.layers {
            for &a in &l.attention {
                for (s, x) in acc.iter_mut().zip(trace.value(a).data()) {
                    *s += x;
                }
                count += 1;
            }
        }
        let c = count.max(1) as f64;
        (0..seg.num_rows())
            .map(|v| seg.range(v).map(|p| acc[p] / c).collect())
            .collect()
    }
}

/// `H^(0) = X W^(0)`.
pub fn initial_embedding(trace: &mut Trace, b: &Bound, attrs: &AttributeOperands) -> Result<Var> {
    let w0 = b.var("natr.w0")?;
    trace.spmm_with_transpose(&attrs.incidence, &attrs.incidence_t, w0)
}

/// Nested forward: encoder, then `M` decoder layers starting from `H̃^(0) = H^(0)`.
pub fn natr_forward(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    inputs: &DecoderInputs<'_>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NatrOutput> {
    run(trace, b, cfg, inputs, None, None, rng)
}

/// Nested or plug-in forward with a caller-supplied `H^(0)` in place of
/// `X W^(0)`, e.g. a leaf for influence analysis.
pub fn natr_forward_from(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    inputs: &DecoderInputs<'_>,
    h0: Var,
    external: Option<Var>,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NatrOutput> {
    run(trace, b, cfg, inputs, Some(h0), external, rng)
}

/// Plug-in forward: queries come from `h_ext` (`N_V × d`) at every layer.
pub fn plugin_forward(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    inputs: &DecoderInputs<'_>,
    h_ext: Var,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NatrOutput> {
    let v = trace.value(h_ext);
    if v.rows() != inputs.graph.num_nodes || v.cols() != cfg.d {
        return Err(Error::Dimension {
            op: "plugin_forward",
            detail: format!(
                "external embeddings {}x{} for {} nodes, d = {}",
                v.rows(),
                v.cols(),
                inputs.graph.num_nodes,
                cfg.d
            ),
        });
    }
    run(trace, b, cfg, inputs, None, Some(h_ext), rng)
}

fn run(
    trace: &mut Trace,
    b: &Bound,
    cfg: &NatrConfig,
    inputs: &DecoderInputs<'_>,
    h0: Option<Var>,
    external: Option<Var>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<NatrOutput> {
    cfg.validate()?;
    let z0 = b.var("natr.z0")?;
    let h0 = match h0 {
        Some(h) => h,
        None => initial_embedding(trace, b, inputs.attrs)?,
    };
    if trace.value(h0).rows() != inputs.graph.num_nodes {
        return Err(Error::Dimension {
            op: "natr_forward",
            detail: "incidence rows vs graph nodes".into(),
        });
    }
    let encoder = encode_attributes(trace, b, cfg, z0, rng.as_deref_mut())?;
    let mut h = external.unwrap_or(h0);
    let mut out_layers = Vec::with_capacity(cfg.decoder_layers);
    for m in 0..cfg.decoder_layers {
        let layer = decode_layer(trace, b, cfg, m, inputs, h, h0, encoder.z, external, rng.as_deref_mut())?;
        h = layer.out;
        out_layers.push(layer);
    }
    Ok(NatrOutput {
        h0,
        encoder,
        layers: out_layers,
    })
}
