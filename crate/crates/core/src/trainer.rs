//! Full-batch training with early stopping for link prediction and node
//! classification, plus negative sampling and subset evaluation.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Trace, Var};
use crate::data::{Dataset, LinkSplit, NodeSplit};
use crate::dilution::{inter_agg, quartile_subsets, QuartileSubsets};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{Bound, ParamStore};
use crate::metrics::{self, FeatureCorr, Mad};
use crate::model::{class_logits, link_scores, Model, ModelInputs, Task};
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
    /// `K` of the Hits@K validation metric.
    pub k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2000,
            patience: 200,
            lr: 0.005,
            seed: 0,
            k: 20,
        }
    }
}

impl TrainConfig {
    /// 10k epochs with 1k patience.
    pub fn paper_protocol(mut self) -> Self {
        self.epochs = 10_000;
        self.patience = 1_000;
        self
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("epochs".into(), self.epochs.to_string()),
            ("patience".into(), self.patience.to_string()),
            ("lr".into(), self.lr.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("k".into(), self.k.to_string()),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub seed: u64,
    pub config: Vec<(String, String)>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    pub best_params: ParamStore,
    pub wall_clock: Duration,
}

/// Uniform rejection sampling of `count` distinct unordered non-edges of `g`
/// that are also absent from `exclude`. Pairs are returned as `(min, max)`.
pub fn negative_sampling(
    g: &Graph,
    exclude: &[(usize, usize)],
    count: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    let n = g.num_nodes();
    let norm = |(a, b): (usize, usize)| (a.min(b), a.max(b));
    let banned: HashSet<(usize, usize)> = exclude
        .iter()
        .map(|&p| norm(p))
        .filter(|&(a, b)| a != b && !g.has_edge(a, b))
        .collect();
    let all_pairs = n * n.saturating_sub(1) / 2;
    let available = all_pairs - g.num_edges() - banned.len();
    if count > available {
        return Err(Error::Contract(format!(
            "requested {count} negatives, only {available} non-edges available"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if count * 2 > available {
        let mut cands: Vec<(usize, usize)> = (0..n)
            .flat_map(|a| (a + 1..n).map(move |b| (a, b)))
            .filter(|&(a, b)| !g.has_edge(a, b) && !banned.contains(&(a, b)))
            .collect();
        cands.shuffle(&mut rng);
        cands.truncate(count);
        return Ok(cands);
    }
    let mut seen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let p = norm((a, b));
        if g.has_edge(p.0, p.1) || banned.contains(&p) || !seen.insert(p) {
            continue;
        }
        out.push(p);
    }
    Ok(out)
}

/// Link prediction data: message passing sees training edges only.
#[derive(Clone, Debug)]
pub struct LinkTask {
    pub full: Graph,
    pub train_graph: Graph,
    pub inputs: ModelInputs,
    pub split: LinkSplit,
}

impl LinkTask {
    pub fn new(ds: &Dataset, split: LinkSplit) -> Result<Self> {
        let train_graph = Graph::new(ds.graph.num_nodes(), &split.train)?;
        let inputs = ModelInputs::new(&train_graph, &ds.attrs)?;
        Ok(Self {
            full: ds.graph.clone(),
            train_graph,
            inputs,
            split,
        })
    }
}

/// Node classification data.
#[derive(Clone, Debug)]
pub struct NodeTask {
    pub graph: Graph,
    pub inputs: ModelInputs,
    pub labels: Arc<Vec<usize>>,
    pub split: NodeSplit,
    pub classes: usize,
}

impl NodeTask {
    pub fn new(ds: &Dataset) -> Result<Self> {
        let labels = ds
            .labels
            .clone()
            .ok_or_else(|| Error::Config(format!("dataset {} has no labels", ds.name)))?;
        let split = ds
            .node_split
            .clone()
            .ok_or_else(|| Error::Config(format!("dataset {} has no node split", ds.name)))?;
        let classes = ds.num_classes().unwrap_or(0);
        Ok(Self {
            graph: ds.graph.clone(),
            inputs: ModelInputs::new(&ds.graph, &ds.attrs)?,
            labels: Arc::new(labels),
            split,
            classes,
        })
    }
}

fn mean_of(trace: &mut Trace, losses: &[Var]) -> Result<Var> {
    let mut acc = losses[0];
    for &l in &losses[1..] {
        acc = trace.add(acc, l)?;
    }
    Ok(trace.scale(acc, 1.0 / losses.len() as f64))
}

/// Mean BCE of link scores over every output; with one output this is the
/// plain loss, with several it is the auxiliary loss.
pub fn link_loss(
    trace: &mut Trace,
    b: &Bound,
    outputs: &[Var],
    pairs: &[(usize, usize)],
    labels: &Arc<Vec<f64>>,
) -> Result<Var> {
    let losses = outputs
        .iter()
        .map(|&h| {
            let s = link_scores(trace, b, h, pairs)?;
            trace.bce(s, labels)
        })
        .collect::<Result<Vec<_>>>()?;
    mean_of(trace, &losses)
}

/// Softmax cross-entropy over `rows` and the matching accuracy.
pub fn node_classification_head(
    trace: &mut Trace,
    b: &Bound,
    h: Var,
    labels: &Arc<Vec<usize>>,
    rows: &Arc<Vec<usize>>,
) -> Result<(Var, f64)> {
    let logits = class_logits(trace, b, h)?;
    let loss = trace.softmax_xent(logits, labels, rows)?;
    let acc = metrics::accuracy(trace.value(logits), labels, rows);
    Ok((loss, acc))
}

fn grad_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
}

struct Stopper {
    best_epoch: usize,
    best_val: f64,
    best_params: Option<ParamStore>,
}

impl Stopper {
    fn new() -> Self {
        Self {
            best_epoch: 0,
            best_val: f64::NEG_INFINITY,
            best_params: None,
        }
    }

    /// Returns true when training should stop.
    fn observe(&mut self, epoch: usize, val: f64, params: &ParamStore, patience: usize) -> bool {
        if val > self.best_val || self.best_params.is_none() {
            self.best_val = val;
            self.best_epoch = epoch;
            self.best_params = Some(params.clone());
            return false;
        }
        epoch - self.best_epoch >= patience
    }
}

fn check_train(model: &Model, cfg: &TrainConfig, want: Task) -> Result<()> {
    if cfg.epochs == 0 {
        return Err(Error::Config("epochs must be >= 1".into()));
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("bad learning rate {}", cfg.lr)));
    }
    let ok = matches!(
        (model.task, want),
        (Task::Link, Task::Link) | (Task::NodeClass { .. }, Task::NodeClass { .. })
    );
    if !ok {
        return Err(Error::Config("model head does not match the task".into()));
    }
    Ok(())
}

fn finish(
    model: &mut Model,
    cfg: &TrainConfig,
    history: Vec<EpochRecord>,
    stop: Stopper,
    start: Instant,
) -> TrainRun {
    let best_params = stop.best_params.expect("at least one epoch");
    model.params = best_params.clone();
    let mut config = model.config.to_kv();
    config.extend(cfg.to_kv());
    TrainRun {
        seed: cfg.seed,
        config,
        history,
        best_epoch: stop.best_epoch,
        best_val: stop.best_val,
        best_params,
        wall_clock: start.elapsed(),
    }
}

/// Trains a link predictor; `model.params` ends at the best-validation state.
pub fn train_link(model: &mut Model, task: &LinkTask, cfg: &TrainConfig) -> Result<TrainRun> {
    check_train(model, cfg, Task::Link)?;
    let start = Instant::now();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED);
    let pos = &task.split.train;
    let mut labels = vec![1.0; pos.len()];
    labels.extend(std::iter::repeat_n(0.0, pos.len()));
    let labels = Arc::new(labels);
    let mut history = Vec::new();
    let mut stop = Stopper::new();
    for epoch in 1..=cfg.epochs {
        let negs = negative_sampling(&task.full, &[], pos.len(), rng.gen())?;
        let mut pairs = pos.clone();
        pairs.extend_from_slice(&negs);
        let mut trace = Trace::new();
        let b = model.params.bind(&mut trace);
        let emb = model.embed(&mut trace, &b, &task.inputs, None, Some(&mut rng))?;
        let loss = link_loss(&mut trace, &b, &emb.outputs, &pairs, &labels)?;
        let lv = trace.value(loss).item();
        let grads = trace.backward(loss)?;
        let gmap = b.collect(&trace, &grads);
        let gn = grad_norm(&gmap);
        if !lv.is_finite() || !gn.is_finite() {
            return Err(Error::NonFinite { epoch, grad_norm: gn });
        }
        opt.step(&mut model.params, &gmap);
        let val = link_hits(model, task, &[&task.split.valid], &task.split.valid_neg, cfg.k)?[0];
        history.push(EpochRecord {
            epoch,
            loss: lv,
            val_metric: val,
        });
        if stop.observe(epoch, val, &model.params, cfg.patience) {
            break;
        }
    }
    Ok(finish(model, cfg, history, stop, start))
}

/// Final-layer embeddings without dropout.
pub fn embed_eval(model: &Model, inputs: &ModelInputs) -> Result<Tensor> {
    let mut trace = Trace::new();
    let b = model.params.bind(&mut trace);
    let emb = model.embed(&mut trace, &b, inputs, None, None)?;
    Ok(trace.value(emb.last()).clone())
}

/// Link scores of `pairs` without dropout.
pub fn score_pairs(model: &Model, inputs: &ModelInputs, lists: &[&[(usize, usize)]]) -> Result<Vec<Vec<f64>>> {
    let mut trace = Trace::new();
    let b = model.params.bind(&mut trace);
    let emb = model.embed(&mut trace, &b, inputs, None, None)?;
    let h = emb.last();
    lists
        .iter()
        .map(|pairs| {
            if pairs.is_empty() {
                return Ok(Vec::new());
            }
            let s = link_scores(&mut trace, &b, h, pairs)?;
            Ok(trace.value(s).data().to_vec())
        })
        .collect()
}

/// Hits@K of each positive list against one shared negative list.
fn link_hits(
    model: &Model,
    task: &LinkTask,
    pos_lists: &[&[(usize, usize)]],
    neg: &[(usize, usize)],
    k: usize,
) -> Result<Vec<f64>> {
    let mut lists: Vec<&[(usize, usize)]> = pos_lists.to_vec();
    lists.push(neg);
    let scores = score_pairs(model, &task.inputs, &lists)?;
    let neg_scores = scores.last().expect("negatives scored");
    scores[..pos_lists.len()]
        .iter()
        .map(|p| metrics::hits_at_k(p, neg_scores, k))
        .collect()
}

/// Test-time quality and smoothness of the final representation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub valid: f64,
    pub test: f64,
    pub mad: Mad,
    pub energy: f64,
    pub corr: FeatureCorr,
}

fn smoothness(h: &Tensor, g: &Graph) -> Result<(Mad, f64, FeatureCorr)> {
    Ok((
        metrics::mad(h, g)?,
        metrics::dirichlet_energy(h, g)?,
        metrics::feature_corr(h)?,
    ))
}

/// Hits@K on valid and test, and smoothness over the full graph.
pub fn evaluate_link(model: &Model, task: &LinkTask, k: usize) -> Result<Evaluation> {
    let sp = &task.split;
    let scores = score_pairs(model, &task.inputs, &[&sp.valid, &sp.valid_neg, &sp.test, &sp.test_neg])?;
    let valid = metrics::hits_at_k(&scores[0], &scores[1], k)?;
    let test = metrics::hits_at_k(&scores[2], &scores[3], k)?;
    let h = embed_eval(model, &task.inputs)?;
    let (mad, energy, corr) = smoothness(&h, &task.full)?;
    Ok(Evaluation {
        valid,
        test,
        mad,
        energy,
        corr,
    })
}

/// Hits@K restricted to test positives inside each edge subset; `None` for
/// an empty subset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SubsetHits {
    pub q1: Option<f64>,
    pub q4: Option<f64>,
}

/// Edge subsets of the test positives from 2-hop aggregation-only factors
/// on the message-passing graph.
pub fn link_subsets(task: &LinkTask) -> Result<QuartileSubsets> {
    let delta = inter_agg(&task.train_graph, 2)?;
    Ok(quartile_subsets(&delta, &task.split.test))
}

pub fn evaluate_subsets(
    model: &Model,
    task: &LinkTask,
    e_q1: &[(usize, usize)],
    e_q4: &[(usize, usize)],
    k: usize,
) -> Result<SubsetHits> {
    let scores = score_pairs(model, &task.inputs, &[e_q1, e_q4, &task.split.test_neg])?;
    let hits = |p: &Vec<f64>| -> Result<Option<f64>> {
        if p.is_empty() {
            Ok(None)
        } else {
            metrics::hits_at_k(p, &scores[2], k).map(Some)
        }
    };
    Ok(SubsetHits {
        q1: hits(&scores[0])?,
        q4: hits(&scores[1])?,
    })
}

/// Trains a node classifier on `split.train`, selecting on validation accuracy.
pub fn train_nodeclass(model: &mut Model, task: &NodeTask, cfg: &TrainConfig) -> Result<TrainRun> {
    check_train(model, cfg, Task::NodeClass { classes: task.classes })?;
    let start = Instant::now();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xC1A5);
    let rows = Arc::new(task.split.train.clone());
    let mut history = Vec::new();
    let mut stop = Stopper::new();
    for epoch in 1..=cfg.epochs {
        let mut trace = Trace::new();
        let b = model.params.bind(&mut trace);
        let emb = model.embed(&mut trace, &b, &task.inputs, None, Some(&mut rng))?;
        let losses = emb
            .outputs
            .iter()
            .map(|&h| Ok(node_classification_head(&mut trace, &b, h, &task.labels, &rows)?.0))
            .collect::<Result<Vec<_>>>()?;
        let loss = mean_of(&mut trace, &losses)?;
        let lv = trace.value(loss).item();
        let grads = trace.backward(loss)?;
        let gmap = b.collect(&trace, &grads);
        let gn = grad_norm(&gmap);
        if !lv.is_finite() || !gn.is_finite() {
            return Err(Error::NonFinite { epoch, grad_norm: gn });
        }
        opt.step(&mut model.params, &gmap);
        let val = node_accuracy(model, task, &task.split.valid)?;
        history.push(EpochRecord {
            epoch,
            loss: lv,
            val_metric: val,
        });
        if stop.observe(epoch, val, &model.params, cfg.patience) {
            break;
        }
    }
    Ok(finish(model, cfg, history, stop, start))
}

fn node_logits(model: &Model, task: &NodeTask) -> Result<(Tensor, Tensor)> {
    let mut trace = Trace::new();
    let b = model.params.bind(&mut trace);
    let emb = model.embed(&mut trace, &b, &task.inputs, None, None)?;
    let h = emb.last();
    let logits = class_logits(&mut trace, &b, h)?;
    Ok((trace.value(h).clone(), trace.value(logits).clone()))
}

fn node_accuracy(model: &Model, task: &NodeTask, rows: &[usize]) -> Result<f64> {
    let (_, logits) = node_logits(model, task)?;
    Ok(metrics::accuracy(&logits, &task.labels, rows))
}

pub fn evaluate_nodeclass(model: &Model, task: &NodeTask) -> Result<Evaluation> {
    let (h, logits) = node_logits(model, task)?;
    let (mad, energy, corr) = smoothness(&h, &task.graph)?;
    Ok(Evaluation {
        valid: metrics::accuracy(&logits, &task.labels, &task.split.valid),
        test: metrics::accuracy(&logits, &task.labels, &task.split.test),
        mad,
        energy,
        corr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complete_graph_has_no_negatives() {
        let g = Graph::from_edges(&[(0, 1), (0, 2), (1, 2)]).unwrap();
        assert!(negative_sampling(&g, &[], 1, 0).is_err());
        assert!(negative_sampling(&g, &[], 0, 0).unwrap().is_empty());
    }

    #[test]
    fn k2_plus_isolated_candidates() {
        let g = Graph::new(3, &[(0, 1)]).unwrap();
        let mut s = negative_sampling(&g, &[], 2, 5).unwrap();
        s.sort();
        assert_eq!(s, vec![(0, 2), (1, 2)]);
        assert_eq!(negative_sampling(&g, &[(2, 0)], 1, 5).unwrap(), vec![(1, 2)]);
        assert!(negative_sampling(&g, &[(2, 0)], 2, 5).is_err());
    }

    #[test]
    fn stopper_keeps_best() {
        let mut s = Stopper::new();
        let p = ParamStore::new();
        assert!(!s.observe(1, 0.2, &p, 2));
        assert!(!s.observe(2, 0.5, &p, 2));
        assert!(!s.observe(3, 0.4, &p, 2));
        assert!(s.observe(4, 0.5, &p, 2));
        assert_eq!((s.best_epoch, s.best_val), (2, 0.5));
    }
}
