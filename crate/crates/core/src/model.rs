//! Model zoo: baseline MPNNs and NATR variants behind one interface, plus the
//! link-prediction and node-classification heads.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Trace, Var};
use crate::data::{AttributeIncidence, AttributeOperands};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{self, glorot, Bound, GatHead, GraphContext, ParamStore};
use crate::natr::{self, DecoderInputs, EncoderKind, LambdaMode, NatrConfig, NatrOutput, NodeModuleKind};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Gcn,
    Gat,
    Sgc,
    Mlp,
    NatrGcn,
    NatrGat,
    NatrSgcPlugin,
    NatrMlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 8] = [
        Self::Gcn,
        Self::Gat,
        Self::Sgc,
        Self::Mlp,
        Self::NatrGcn,
        Self::NatrGat,
        Self::NatrSgcPlugin,
        Self::NatrMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Gcn => "gcn",
            Self::Gat => "gat",
            Self::Sgc => "sgc",
            Self::Mlp => "mlp",
            Self::NatrGcn => "natr-gcn",
            Self::NatrGat => "natr-gat",
            Self::NatrSgcPlugin => "natr-sgc-plugin",
            Self::NatrMlp => "natr-mlp",
        }
    }

    pub fn is_natr(self) -> bool {
        matches!(
            self,
            Self::NatrGcn | Self::NatrGat | Self::NatrSgcPlugin | Self::NatrMlp
        )
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Link,
    NodeClass { classes: usize },
}

/// Fully resolved model hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Baseline layers, or decoder layers for NATR.
    pub layers: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub gat_heads: usize,
    pub sgc_k: usize,
    pub jk: bool,
    pub encoder_layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub encoder: EncoderKind,
    pub lambda: LambdaMode,
    pub aux_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let n = NatrConfig::default();
        Self {
            kind: ModelKind::Gcn,
            layers: 2,
            hidden: n.d,
            dropout: n.dropout,
            gat_heads: 1,
            sgc_k: 2,
            jk: false,
            encoder_layers: n.encoder_layers,
            heads: n.heads,
            d_ffn: n.d_ffn,
            encoder: n.encoder,
            lambda: n.lambda,
            aux_loss: n.aux_loss,
        }
    }
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn natr(&self) -> NatrConfig {
        NatrConfig {
            encoder_layers: self.encoder_layers,
            decoder_layers: self.layers,
            heads: self.heads,
            d: self.hidden,
            d_ffn: self.d_ffn,
            dropout: self.dropout,
            node_module: match self.kind {
                ModelKind::NatrGat => NodeModuleKind::Gat,
                ModelKind::NatrMlp => NodeModuleKind::Mlp,
                _ => NodeModuleKind::Gcn,
            },
            encoder: self.encoder,
            lambda: self.lambda,
            plugin: self.kind == ModelKind::NatrSgcPlugin,
            aux_loss: self.aux_loss,
            gat_heads: self.gat_heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.gat_heads == 0 || !self.hidden.is_multiple_of(self.gat_heads) {
            return Err(Error::Config("hidden not divisible by gat heads".into()));
        }
        if self.sgc_k == 0 {
            return Err(Error::Config("sgc k must be >= 1".into()));
        }
        if self.kind.is_natr() {
            self.natr().validate()?;
        }
        Ok(())
    }

    /// Key-value rendering used in manifests and checkpoint headers.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("model".into(), self.kind.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("gat_heads".into(), self.gat_heads.to_string()),
            ("gat_slope".into(), layers::GAT_SLOPE.to_string()),
            ("sgc_k".into(), self.sgc_k.to_string()),
            ("jk".into(), self.jk.to_string()),
            ("enc_layers".into(), self.encoder_layers.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("d_ffn".into(), self.d_ffn.to_string()),
            ("encoder".into(), self.encoder.to_string()),
            ("lambda".into(), self.lambda.to_string()),
            ("aux_loss".into(), self.aux_loss.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        fn get<'a>(kv: &'a BTreeMap<String, String>, k: &str) -> Result<&'a str> {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("missing key {k}")))
        }
        fn num<T: FromStr>(kv: &BTreeMap<String, String>, k: &str) -> Result<T> {
            get(kv, k)?
                .parse()
                .map_err(|_| Error::Config(format!("bad value for {k}")))
        }
        let cfg = Self {
            kind: get(kv, "model")?.parse()?,
            layers: num(kv, "layers")?,
            hidden: num(kv, "hidden")?,
            dropout: num(kv, "dropout")?,
            gat_heads: num(kv, "gat_heads")?,
            sgc_k: num(kv, "sgc_k")?,
            jk: num(kv, "jk")?,
            encoder_layers: num(kv, "enc_layers")?,
            heads: num(kv, "heads")?,
            d_ffn: num(kv, "d_ffn")?,
            encoder: match get(kv, "encoder")? {
                "self-attn" => EncoderKind::SelfAttn,
                "mlp" => EncoderKind::Mlp,
                o => return Err(Error::Config(format!("unknown encoder {o}"))),
            },
            lambda: get(kv, "lambda")?.parse()?,
            aux_loss: num(kv, "aux_loss")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Constant graph and attribute operands for one forward pass.
#[derive(Clone, Debug)]
pub struct ModelInputs {
    pub graph: GraphContext,
    pub attrs: AttributeOperands,
    pub offsets: Option<Arc<Tensor>>,
}

impl ModelInputs {
    pub fn new(g: &Graph, attrs: &AttributeIncidence) -> Result<Self> {
        if g.num_nodes() != attrs.num_nodes() {
            return Err(Error::Dimension {
                op: "ModelInputs",
                detail: format!("{} graph nodes vs {} attribute rows", g.num_nodes(), attrs.num_nodes()),
            });
        }
        let offsets = attrs
            .logit_offsets()
            .map(|o| Arc::new(Tensor::from_vec(o.len(), 1, o)));
        Ok(Self {
            graph: GraphContext::new(g),
            attrs: AttributeOperands::new(attrs),
            offsets,
        })
    }

    fn decoder(&self) -> DecoderInputs<'_> {
        DecoderInputs {
            graph: &self.graph,
            attrs: &self.attrs,
            offsets: self.offsets.clone(),
        }
    }
}

/// Node representations produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Embeddings {
    /// Outputs fed to the task head; the last one is the final representation.
    /// NATR with the auxiliary loss lists every decoder layer.
    pub outputs: Vec<Var>,
    pub natr: Option<NatrOutput>,
}

impl Embeddings {
    pub fn last(&self) -> Var {
        *self.outputs.last().expect("non-empty outputs")
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub task: Task,
    pub num_attributes: usize,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, task: Task, num_attributes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if num_attributes == 0 {
            return Err(Error::Config("model needs at least one attribute".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.hidden;
        let l = config.layers;
        match config.kind {
            ModelKind::Gcn | ModelKind::Mlp => {
                p.insert("base.w0", glorot(num_attributes, d, &mut rng));
                for i in 0..l {
                    p.insert(format!("base.{i}.w"), glorot(d, d, &mut rng));
                    p.insert(format!("base.{i}.b"), Tensor::zeros(1, d));
                }
            }
            ModelKind::Gat => {
                p.insert("base.w0", glorot(num_attributes, d, &mut rng));
                for i in 0..l {
                    let last = i + 1 == l;
                    let dh = if last { d } else { d / config.gat_heads };
                    for h in 0..config.gat_heads {
                        p.insert(format!("base.{i}.h{h}.w"), glorot(d, dh, &mut rng));
                        p.insert(format!("base.{i}.h{h}.a_dst"), glorot(dh, 1, &mut rng));
                        p.insert(format!("base.{i}.h{h}.a_src"), glorot(dh, 1, &mut rng));
                    }
                }
            }
            ModelKind::Sgc => {
                p.insert("base.w0", glorot(num_attributes, d, &mut rng));
            }
            ModelKind::NatrSgcPlugin => {
                p.insert("plugin.w", glorot(num_attributes, d, &mut rng));
                natr::init_params(&config.natr(), num_attributes, &mut p, &mut rng);
            }
            _ => natr::init_params(&config.natr(), num_attributes, &mut p, &mut rng),
        }
        if config.jk && !config.kind.is_natr() && config.kind != ModelKind::Sgc {
            p.insert("base.jk.w", glorot(l * d, d, &mut rng));
        }
        match task {
            Task::Link => {
                p.insert("pred.w1", glorot(d, d, &mut rng));
                p.insert("pred.b1", Tensor::zeros(1, d));
                p.insert("pred.w2", glorot(d, 1, &mut rng));
                p.insert("pred.b2", Tensor::zeros(1, 1));
            }
            Task::NodeClass { classes } => {
                if classes < 2 {
                    return Err(Error::Config("node classification needs >= 2 classes".into()));
                }
                p.insert("cls.w", glorot(d, classes, &mut rng));
                p.insert("cls.b", Tensor::zeros(1, classes));
            }
        }
        Ok(Self {
            config,
            task,
            num_attributes,
            params: p,
        })
    }

    /// `H^(0) = X W^(0)` as a plain tensor.
    pub fn initial_embedding(&self, inputs: &ModelInputs) -> Result<Tensor> {
        let name = if self.config.kind.is_natr() { "natr.w0" } else { "base.w0" };
        let w0 = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing {name}")))?;
        if inputs.attrs.incidence.cols() != w0.rows() {
            return Err(Error::Dimension {
                op: "initial_embedding",
                detail: "attribute count vs W0 rows".into(),
            });
        }
        Ok(inputs.attrs.incidence.mul_dense(w0))
    }

    /// Forward pass. `h0` replaces `X W^(0)` when given; `rng` enables dropout.
    pub fn embed(
        &self,
        trace: &mut Trace,
        b: &Bound,
        inputs: &ModelInputs,
        h0: Option<Var>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Embeddings> {
        let cfg = &self.config;
        if inputs.attrs.incidence.cols() != self.num_attributes {
            return Err(Error::Dimension {
                op: "embed",
                detail: format!(
                    "{} attributes in data, {} in model",
                    inputs.attrs.incidence.cols(),
                    self.num_attributes
                ),
            });
        }
        if cfg.kind.is_natr() {
            let ncfg = cfg.natr();
            let dec = inputs.decoder();
            let h0 = match h0 {
                Some(h) => h,
                None => natr::initial_embedding(trace, b, &inputs.attrs)?,
            };
            let external = if ncfg.plugin {
                let w = b.var("plugin.w")?;
                let xw = trace.spmm_with_transpose(&inputs.attrs.incidence, &inputs.attrs.incidence_t, w)?;
                let mut cur = xw;
                for _ in 0..cfg.sgc_k {
                    cur = inputs.graph.aggregate(trace, cur)?;
                }
                Some(cur)
            } else {
                None
            };
            let out = natr::natr_forward_from(trace, b, &ncfg, &dec, h0, external, rng)?;
            let outputs = if ncfg.aux_loss {
                out.outputs()
            } else {
                vec![out.final_out()]
            };
            return Ok(Embeddings {
                outputs,
                natr: Some(out),
            });
        }
        let h0 = match h0 {
            Some(h) => h,
            None => {
                let w0 = b.var("base.w0")?;
                trace.spmm_with_transpose(&inputs.attrs.incidence, &inputs.attrs.incidence_t, w0)?
            }
        };
        let ctx = &inputs.graph;
        if cfg.kind == ModelKind::Sgc {
            let mut cur = h0;
            for _ in 0..cfg.sgc_k {
                cur = ctx.aggregate(trace, cur)?;
            }
            return Ok(Embeddings {
                outputs: vec![cur],
                natr: None,
            });
        }
        let mut h = h0;
        let mut per_layer = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let last = i + 1 == cfg.layers;
            let activate = !last || cfg.jk;
            let x = layers::dropout(trace, h, cfg.dropout, rng.as_deref_mut())?;
            h = match cfg.kind {
                ModelKind::Gcn => {
                    let w = b.var(&format!("base.{i}.w"))?;
                    let bias = b.var(&format!("base.{i}.b"))?;
                    layers::gcn_forward(trace, x, ctx, w, Some(bias), activate)?
                }
                ModelKind::Mlp => {
                    let w = b.var(&format!("base.{i}.w"))?;
                    let bias = b.var(&format!("base.{i}.b"))?;
                    layers::mlp_forward(trace, x, w, Some(bias), activate)?
                }
                ModelKind::Gat => {
                    let heads = (0..cfg.gat_heads)
                        .map(|hd| {
                            Ok(GatHead {
                                w: b.var(&format!("base.{i}.h{hd}.w"))?,
                                a_dst: b.var(&format!("base.{i}.h{hd}.a_dst"))?,
                                a_src: b.var(&format!("base.{i}.h{hd}.a_src"))?,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    layers::gat_forward(trace, x, ctx, &heads, !last, activate)?.h
                }
                _ => unreachable!("handled above"),
            };
            per_layer.push(h);
        }
        if cfg.jk {
            h = layers::jk_concat(trace, &per_layer, b.var("base.jk.w")?)?;
        }
        Ok(Embeddings {
            outputs: vec![h],
            natr: None,
        })
    }
}

/// `sigmoid(w2ᵀ relu(W1 (h_u ⊙ h_v) + b1) + b2)` for every pair; `P × 1`.
pub fn link_scores(trace: &mut Trace, b: &Bound, h: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let us = Arc::new(pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let vs = Arc::new(pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let hu = trace.gather_rows(h, &us)?;
    let hv = trace.gather_rows(h, &vs)?;
    let x = trace.hadamard(hu, hv)?;
    let x = trace.matmul(x, b.var("pred.w1")?)?;
    let x = trace.add_row(x, b.var("pred.b1")?)?;
    let x = trace.relu(x);
    let x = trace.matmul(x, b.var("pred.w2")?)?;
    let x = trace.add_row(x, b.var("pred.b2")?)?;
    Ok(trace.sigmoid(x))
}

/// Linear class logits `H W + b`.
pub fn class_logits(trace: &mut Trace, b: &Bound, h: Var) -> Result<Var> {
    let x = trace.matmul(h, b.var("cls.w")?)?;
    trace.add_row(x, b.var("cls.b")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_roundtrip() {
        for k in ModelKind::ALL {
            assert_eq!(k.name().parse::<ModelKind>().unwrap(), k);
        }
        assert!("sage".parse::<ModelKind>().is_err());
    }

    #[test]
    fn config_kv_roundtrip() {
        let mut c = ModelConfig::new(ModelKind::NatrGat);
        c.lambda = LambdaMode::Fixed(0.3);
        c.encoder = EncoderKind::Mlp;
        let kv: BTreeMap<String, String> = c.to_kv().into_iter().collect();
        assert_eq!(ModelConfig::from_kv(&kv).unwrap(), c);
    }

    #[test]
    fn link_score_symmetric() {
        let m = Model::new(
            ModelConfig {
                hidden: 4,
                ..ModelConfig::new(ModelKind::Gcn)
            },
            Task::Link,
            3,
            7,
        )
        .unwrap();
        let mut t = Trace::new();
        let b = m.params.bind(&mut t);
        let h = t.constant(Tensor::from_vec(2, 4, vec![0.1, -0.5, 0.3, 2.0, 1.0, 0.2, -0.7, 0.4]));
        let s = link_scores(&mut t, &b, h, &[(0, 1), (1, 0)]).unwrap();
        let v = t.value(s).data();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn zero_embedding_scores_bias_path() {
        let m = Model::new(
            ModelConfig {
                hidden: 4,
                ..ModelConfig::new(ModelKind::Gcn)
            },
            Task::Link,
            3,
            7,
        )
        .unwrap();
        let mut t = Trace::new();
        let b = m.params.bind(&mut t);
        let h = t.constant(Tensor::zeros(2, 4));
        let s = link_scores(&mut t, &b, h, &[(0, 1)]).unwrap();
        // Zero biases at init: relu(0)·w2 + 0 = 0.
        assert_eq!(t.value(s).item(), 0.5);
    }
}
