//! Datasets: attribute incidence, TSV storage, splits, synthetic generators
//! and binarisation of continuous features.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::sparse::{Segments, SparseMatrix};
use crate::trainer::negative_sampling;

/// Per-node sorted attribute sets `T_v`, i.e. the binary matrix `X`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeIncidence {
    num_attributes: usize,
    sets: Vec<Vec<usize>>,
    /// Optional magnitudes aligned with `sets`, used as attention-logit offsets.
    magnitudes: Option<Vec<Vec<f64>>>,
}

impl AttributeIncidence {
    /// Validates ids and uniqueness; lists are sorted on construction.
    pub fn new(num_attributes: usize, sets: Vec<Vec<usize>>) -> Result<Self> {
        let mut sets = sets;
        for (v, s) in sets.iter_mut().enumerate() {
            s.sort_unstable();
            if let Some(w) = s.windows(2).find(|w| w[0] == w[1]) {
                return Err(Error::Format(format!(
                    "node {v} lists attribute {} twice",
                    w[0]
                )));
            }
            if let Some(&t) = s.last() {
                if t >= num_attributes {
                    return Err(Error::Format(format!(
                        "node {v} has attribute {t} >= {num_attributes}"
                    )));
                }
            }
        }
        Ok(Self {
            num_attributes,
            sets,
            magnitudes: None,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.sets.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn attrs(&self, v: usize) -> &[usize] {
        &self.sets[v]
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }

    pub fn has(&self, v: usize, t: usize) -> bool {
        self.sets[v].binary_search(&t).is_ok()
    }

    /// Total number of (node, attribute) incidences.
    pub fn nnz(&self) -> usize {
        self.sets.iter().map(Vec::len).sum()
    }

    pub fn empty_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&v| self.sets[v].is_empty()).collect()
    }

    pub fn magnitudes(&self) -> Option<&[Vec<f64>]> {
        self.magnitudes.as_deref()
    }

    pub fn segments(&self) -> Segments {
        Segments::from_lists(&self.sets, self.num_attributes)
    }

    /// `X` as a sparse `N_V × N_T` matrix of ones.
    pub fn incidence_matrix(&self) -> SparseMatrix {
        let rows: Vec<Vec<(usize, f64)>> = self
            .sets
            .iter()
            .map(|s| s.iter().map(|&t| (t, 1.0)).collect())
            .collect();
        SparseMatrix::from_rows(self.num_attributes, &rows)
    }

    /// Per-incidence logit offsets (segment order), when magnitudes are set.
    pub fn logit_offsets(&self) -> Option<Vec<f64>> {
        self.magnitudes.as_ref().map(|m| m.concat())
    }

    /// Gives every attribute-less node one shared dummy attribute with id
    /// `N_T` (growing `N_T` by one). No-op when no node is empty.
    pub fn with_dummy_attribute(&self) -> Self {
        let empty = self.empty_nodes();
        if empty.is_empty() {
            return self.clone();
        }
        let dummy = self.num_attributes;
        let mut out = self.clone();
        out.num_attributes += 1;
        for v in empty {
            out.sets[v].push(dummy);
            if let Some(m) = &mut out.magnitudes {
                m[v].push(0.0);
            }
        }
        out
    }

    /// Applies the same relabelling `perm[old] = new` to every attribute id.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let sets = self
            .sets
            .iter()
            .map(|s| {
                let mut s: Vec<usize> = s.iter().map(|&t| perm[t]).collect();
                s.sort_unstable();
                s
            })
            .collect();
        AttributeIncidence {
            num_attributes: self.num_attributes,
            sets,
            magnitudes: None,
        }
    }
}

/// Undirected positive edges per split plus equally sized negative pools.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinkSplit {
    pub train: Vec<(usize, usize)>,
    pub valid: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub valid_neg: Vec<(usize, usize)>,
    pub test_neg: Vec<(usize, usize)>,
    pub seed: u64,
}

/// Node index split for node classification.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NodeSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graph: Graph,
    pub attrs: AttributeIncidence,
    pub labels: Option<Vec<usize>>,
    pub node_split: Option<NodeSplit>,
    /// Provenance key/values (generator parameters, seeds).
    pub meta: BTreeMap<String, String>,
}

impl Dataset {
    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.graph.num_nodes();
        if self.attrs.num_nodes() != n {
            return Err(Error::Format(format!(
                "{} attribute rows for {} nodes",
                self.attrs.num_nodes(),
                n
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::Format(format!("{} labels for {} nodes", l.len(), n)));
            }
        }
        if let Some(s) = &self.node_split {
            if s.train.iter().chain(&s.valid).chain(&s.test).any(|&v| v >= n) {
                return Err(Error::Format("split index out of range".into()));
            }
        }
        Ok(())
    }
}

fn parse_pair(file: &str, lineno: usize, line: &str) -> Result<(usize, usize)> {
    let perr = |msg: String| Error::Parse {
        file: file.to_string(),
        line: lineno,
        msg,
    };
    let mut it = line.split('\t');
    let (a, b) = match (it.next(), it.next(), it.next()) {
        (Some(a), Some(b), None) => (a, b),
        _ => return Err(perr(format!("expected two tab-separated fields, got {line:?}"))),
    };
    let a = a.trim().parse::<usize>().map_err(|e| perr(format!("{a:?}: {e}")))?;
    let b = b.trim().parse::<usize>().map_err(|e| perr(format!("{b:?}: {e}")))?;
    Ok((a, b))
}

fn read_pairs(path: &Path) -> Result<Vec<(usize, usize, usize)>> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = parse_pair(&name, i + 1, line)?;
        out.push((i + 1, a, b));
    }
    Ok(out)
}

/// Reads `meta.txt`, `edges.tsv`, `attrs.tsv` and the optional `labels.tsv`
/// and `split.tsv` from `dir`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_text = fs::read_to_string(dir.join("meta.txt"))?;
    let mut meta = BTreeMap::new();
    for (i, line) in meta_text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            file: "meta.txt".into(),
            line: i + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        meta.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get_num = |k: &str| -> Result<usize> {
        meta.get(k)
            .ok_or_else(|| Error::Format(format!("meta.txt lacks {k}")))?
            .parse()
            .map_err(|e| Error::Format(format!("meta.txt {k}: {e}")))
    };
    let n = get_num("num_nodes")?;
    let nt = get_num("num_attributes")?;
    let name = meta.get("name").cloned().unwrap_or_default();

    let mut edges = Vec::new();
    for (line, u, v) in read_pairs(&dir.join("edges.tsv"))? {
        let err = |msg: String| Error::Parse {
            file: "edges.tsv".into(),
            line,
            msg,
        };
        if u >= n || v >= n {
            return Err(err(format!("node id out of range (num_nodes={n})")));
        }
        if u == v {
            return Err(err(format!("self-loop ({u},{v})")));
        }
        edges.push((u, v));
    }
    let graph = Graph::new(n, &edges)?;

    let mut sets = vec![Vec::new(); n];
    let mut seen = HashSet::new();
    for (line, v, t) in read_pairs(&dir.join("attrs.tsv"))? {
        let err = |msg: String| Error::Parse {
            file: "attrs.tsv".into(),
            line,
            msg,
        };
        if v >= n {
            return Err(err(format!("dangling node id {v}")));
        }
        if t >= nt {
            return Err(err(format!("attribute id {t} >= {nt}")));
        }
        if !seen.insert((v, t)) {
            return Err(err(format!("duplicate attribute {t} for node {v}")));
        }
        sets[v].push(t);
    }
    let attrs = AttributeIncidence::new(nt, sets)?;

    let labels = if dir.join("labels.tsv").exists() {
        let mut labels = vec![None; n];
        for (line, v, c) in read_pairs(&dir.join("labels.tsv"))? {
            if v >= n {
                return Err(Error::Parse {
                    file: "labels.tsv".into(),
                    line,
                    msg: format!("dangling node id {v}"),
                });
            }
            labels[v] = Some(c);
        }
        let labels: Option<Vec<usize>> = labels.into_iter().collect();
        Some(labels.ok_or_else(|| Error::Format("labels.tsv misses nodes".into()))?)
    } else {
        None
    };

    let node_split = if dir.join("split.tsv").exists() {
        let text = fs::read_to_string(dir.join("split.tsv"))?;
        let mut s = NodeSplit::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                file: "split.tsv".into(),
                line: i + 1,
                msg,
            };
            let (v, part) = line
                .split_once('\t')
                .ok_or_else(|| perr("expected node<TAB>part".into()))?;
            let v: usize = v.parse().map_err(|e| perr(format!("{e}")))?;
            if v >= n {
                return Err(perr(format!("dangling node id {v}")));
            }
            match part.trim() {
                "train" => s.train.push(v),
                "valid" => s.valid.push(v),
                "test" => s.test.push(v),
                other => return Err(perr(format!("unknown split {other:?}"))),
            }
        }
        Some(s)
    } else {
        None
    };

    let ds = Dataset {
        name,
        graph,
        attrs,
        labels,
        node_split,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes the dataset in the TSV layout read by [`load_dataset`], with
/// sorted, LF-terminated output.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = ds.meta.clone();
    meta.insert("name".into(), ds.name.clone());
    meta.insert("num_nodes".into(), ds.graph.num_nodes().to_string());
    meta.insert("num_attributes".into(), ds.attrs.num_attributes().to_string());
    let mut f = fs::File::create(dir.join("meta.txt"))?;
    for (k, v) in &meta {
        writeln!(f, "{k}={v}")?;
    }

    let mut buf = String::new();
    for (u, v) in ds.graph.edges() {
        buf.push_str(&format!("{u}\t{v}\n"));
    }
    fs::write(dir.join("edges.tsv"), &buf)?;

    buf.clear();
    for v in 0..ds.attrs.num_nodes() {
        for t in ds.attrs.attrs(v) {
            buf.push_str(&format!("{v}\t{t}\n"));
        }
    }
    fs::write(dir.join("attrs.tsv"), &buf)?;

    if let Some(labels) = &ds.labels {
        buf.clear();
        for (v, c) in labels.iter().enumerate() {
            buf.push_str(&format!("{v}\t{c}\n"));
        }
        fs::write(dir.join("labels.tsv"), &buf)?;
    }
    if let Some(s) = &ds.node_split {
        let mut rows: Vec<(usize, &str)> = s
            .train
            .iter()
            .map(|&v| (v, "train"))
            .chain(s.valid.iter().map(|&v| (v, "valid")))
            .chain(s.test.iter().map(|&v| (v, "test")))
            .collect();
        rows.sort_unstable();
        buf.clear();
        for (v, p) in rows {
            buf.push_str(&format!("{v}\t{p}\n"));
        }
        fs::write(dir.join("split.tsv"), &buf)?;
    }
    Ok(())
}

/// Split counts for `total` items: valid and test are floored, train takes
/// the remainder.
pub fn split_counts(total: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must sum to 1")));
    }
    let valid = (b * total as f64 + 1e-9).floor() as usize;
    let test = (c * total as f64 + 1e-9).floor() as usize;
    if (b > 0.0 && valid == 0) || (c > 0.0 && test == 0) {
        return Err(Error::Config(format!(
            "{total} edges are too few for ratios {ratios:?}"
        )));
    }
    Ok((total - valid - test, valid, test))
}

/// Uniform random partition of the undirected edges, plus negatives for the
/// valid and test splits sampled away from every positive edge.
pub fn make_link_split(g: &Graph, ratios: (f64, f64, f64), seed: u64) -> Result<LinkSplit> {
    let mut edges = g.edges();
    let (n_train, n_valid, n_test) = split_counts(edges.len(), ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    edges.shuffle(&mut rng);
    let mut train = edges[..n_train].to_vec();
    let mut valid = edges[n_train..n_train + n_valid].to_vec();
    let mut test = edges[n_train + n_valid..].to_vec();
    debug_assert_eq!(test.len(), n_test);
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    let negs = negative_sampling(g, &[], n_valid + n_test, seed.wrapping_add(1))?;
    let valid_neg = negs[..n_valid].to_vec();
    let test_neg = negs[n_valid..].to_vec();
    Ok(LinkSplit {
        train,
        valid,
        test,
        valid_neg,
        test_neg,
        seed,
    })
}

/// Parameters of the class-key synthetic attribute generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub num_classes: usize,
    pub keys_per_class: usize,
    pub p_key: f64,
    pub p_nonkey: f64,
    /// Total attribute count including the `C · keys_per_class` key block.
    pub total_attributes: usize,
    pub splits: (usize, usize, usize),
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            num_classes: 7,
            keys_per_class: 10,
            p_key: 0.8,
            p_nonkey: 0.2,
            total_attributes: CORA_LIKE_ATTRIBUTES,
            splits: (1000, 210, 1785),
        }
    }
}

/// Keeps the base topology and labels and draws a fresh attribute matrix:
/// class `c` owns key attributes `c·k .. (c+1)·k`; each node holds its own
/// keys with `p_key` and every other attribute with `p_nonkey`.
pub fn generate_synthetic(
    base: &Graph,
    labels: &[usize],
    params: &SynthParams,
    seed: u64,
) -> Result<Dataset> {
    let n = base.num_nodes();
    let p = params;
    if labels.len() != n {
        return Err(Error::Config("label count differs from node count".into()));
    }
    if labels.iter().any(|&c| c >= p.num_classes) {
        return Err(Error::Config("label outside num_classes".into()));
    }
    let key_total = p.num_classes * p.keys_per_class;
    if p.total_attributes < key_total || p.keys_per_class == 0 {
        return Err(Error::Config(format!(
            "total_attributes {} below key block {key_total}",
            p.total_attributes
        )));
    }
    for prob in [p.p_key, p.p_nonkey] {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::Config(format!("probability {prob} outside [0,1]")));
        }
    }
    let (tr, va, te) = p.splits;
    if tr + va + te > n {
        return Err(Error::Config(format!(
            "split sizes {tr}+{va}+{te} exceed {n} nodes"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::with_capacity(n);
    let mut forced = 0usize;
    for &c in labels {
        let keys = c * p.keys_per_class..(c + 1) * p.keys_per_class;
        let mut s: Vec<usize> = (0..p.total_attributes)
            .filter(|t| {
                let prob = if keys.contains(t) { p.p_key } else { p.p_nonkey };
                rng.gen::<f64>() < prob
            })
            .collect();
        if s.is_empty() {
            s.push(keys.start + rng.gen_range(0..p.keys_per_class));
            forced += 1;
        }
        sets.push(s);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut split = NodeSplit {
        train: order[..tr].to_vec(),
        valid: order[tr..tr + va].to_vec(),
        test: order[tr + va..tr + va + te].to_vec(),
    };
    split.train.sort_unstable();
    split.valid.sort_unstable();
    split.test.sort_unstable();

    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "class-key-synthetic".into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("num_classes".into(), p.num_classes.to_string());
    meta.insert("keys_per_class".into(), p.keys_per_class.to_string());
    meta.insert("p_key".into(), p.p_key.to_string());
    meta.insert("p_nonkey".into(), p.p_nonkey.to_string());
    meta.insert("forced_key_nodes".into(), forced.to_string());

    Ok(Dataset {
        name: "synthetic".into(),
        graph: base.clone(),
        attrs: AttributeIncidence::new(p.total_attributes, sets)?,
        labels: Some(labels.to_vec()),
        node_split: Some(split),
        meta,
    })
}

/// True iff attribute `t` is one of the keys of class `c`.
pub fn is_key_attribute(t: usize, class: usize, keys_per_class: usize) -> bool {
    t / keys_per_class == class && t < (class + 1) * keys_per_class
}

pub const CORA_LIKE_NODES: usize = 2995;
pub const CORA_LIKE_EDGES: usize = 8158;
pub const CORA_LIKE_CLASSES: usize = 7;
pub const CORA_LIKE_ATTRIBUTES: usize = 1000;
const CORA_LIKE_COMMUNITIES_PER_CLASS: usize = 5;
const CORA_LIKE_COMMUNITY_ATTRS: usize = 16;
const CORA_LIKE_CLASS_ATTRS: usize = 20;

/// Cora-ML-sized stand-in: a degree-corrected stochastic block model with
/// 7 classes, each split into 5 communities, and class/community-correlated
/// attributes mixed with background noise.
///
/// Edges prefer the same community, then the same class. Each node holds
/// attributes of its own community with probability 0.4, of its class with
/// 0.15, random background attributes with 0.05, and attributes of other
/// communities with 0.01.
pub fn generate_cora_like(seed: u64) -> Result<Dataset> {
    let n = CORA_LIKE_NODES;
    let c = CORA_LIKE_CLASSES;
    let k = CORA_LIKE_COMMUNITIES_PER_CLASS;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let community: Vec<usize> = labels.iter().map(|&l| l * k + rng.gen_range(0..k)).collect();
    // Pareto(α≈2.5) node weights give a heavy-tailed degree profile.
    let theta: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen_range(1e-9..1.0);
            u.powf(-1.0 / 1.5).min(40.0)
        })
        .collect();

    let mut by_comm: Vec<Vec<usize>> = vec![Vec::new(); c * k];
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for v in 0..n {
        by_comm[community[v]].push(v);
        by_class[labels[v]].push(v);
    }
    let all: Vec<usize> = (0..n).collect();
    let pick = |pool: &[usize], rng: &mut ChaCha8Rng| -> usize {
        let total: f64 = pool.iter().map(|&v| theta[v]).sum();
        let mut r = rng.gen::<f64>() * total;
        for &v in pool {
            r -= theta[v];
            if r <= 0.0 {
                return v;
            }
        }
        *pool.last().expect("non-empty pool")
    };

    let mut edges = HashSet::new();
    while edges.len() < CORA_LIKE_EDGES {
        let u = pick(&all, &mut rng);
        let r: f64 = rng.gen();
        let pool = if r < 0.6 {
            &by_comm[community[u]]
        } else if r < 0.85 {
            &by_class[labels[u]]
        } else {
            &all
        };
        let v = pick(pool, &mut rng);
        if u != v {
            edges.insert((u.min(v), u.max(v)));
        }
    }
    let mut edges: Vec<_> = edges.into_iter().collect();
    edges.sort_unstable();
    let graph = Graph::new(n, &edges)?;

    let comm_attrs = c * k * CORA_LIKE_COMMUNITY_ATTRS;
    let class_base = comm_attrs;
    let noise_base = class_base + c * CORA_LIKE_CLASS_ATTRS;
    let nt = CORA_LIKE_ATTRIBUTES;
    let mut sets = Vec::with_capacity(n);
    for v in 0..n {
        let own = community[v] * CORA_LIKE_COMMUNITY_ATTRS..(community[v] + 1) * CORA_LIKE_COMMUNITY_ATTRS;
        let cls = class_base + labels[v] * CORA_LIKE_CLASS_ATTRS
            ..class_base + (labels[v] + 1) * CORA_LIKE_CLASS_ATTRS;
        let mut s: Vec<usize> = (0..nt)
            .filter(|t| {
                let p = if own.contains(t) {
                    0.4
                } else if cls.contains(t) {
                    0.15
                } else if *t >= noise_base {
                    0.05
                } else if *t < comm_attrs {
                    0.01
                } else {
                    0.0
                };
                rng.gen::<f64>() < p
            })
            .collect();
        if s.is_empty() {
            s.push(own.start + rng.gen_range(0..CORA_LIKE_COMMUNITY_ATTRS));
        }
        sets.push(s);
    }

    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "cora-like-dcsbm".into());
    meta.insert("seed".into(), seed.to_string());
    Ok(Dataset {
        name: "cora-like".into(),
        graph,
        attrs: AttributeIncidence::new(nt, sets)?,
        labels: Some(labels),
        node_split: None,
        meta,
    })
}

/// How continuous features become attribute sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BinarizeMode {
    /// `X_{v,t} = 1` iff the value exceeds the threshold.
    Threshold(f64),
    /// Every nonzero value becomes an attribute and keeps its magnitude as
    /// an additive attention-logit offset.
    Magnitude,
}

/// Converts a dense `N_V × N_T` feature matrix into attribute sets.
pub fn binarize(features: &[Vec<f64>], mode: BinarizeMode) -> Result<AttributeIncidence> {
    let nt = features.first().map_or(0, Vec::len);
    let mut sets = Vec::with_capacity(features.len());
    let mut mags = Vec::with_capacity(features.len());
    for (v, row) in features.iter().enumerate() {
        if row.len() != nt {
            return Err(Error::Format(format!("row {v} has {} values, expected {nt}", row.len())));
        }
        if let Some(t) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::Format(format!("non-finite feature at ({v},{t})")));
        }
        let (s, m): (Vec<usize>, Vec<f64>) = match mode {
            BinarizeMode::Threshold(tau) => row
                .iter()
                .enumerate()
                .filter(|(_, &x)| x > tau)
                .map(|(t, _)| (t, 1.0))
                .unzip(),
            BinarizeMode::Magnitude => row
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0.0)
                .map(|(t, &x)| (t, x))
                .unzip(),
        };
        sets.push(s);
        mags.push(m);
    }
    let mut inc = AttributeIncidence::new(nt, sets)?;
    if matches!(mode, BinarizeMode::Magnitude) {
        inc.magnitudes = Some(mags);
    }
    Ok(inc)
}

/// Shared, trace-ready handles for an attribute incidence.
#[derive(Clone, Debug)]
pub struct AttributeOperands {
    pub segments: Arc<Segments>,
    pub incidence: Arc<SparseMatrix>,
    pub incidence_t: Arc<SparseMatrix>,
}

impl AttributeOperands {
    pub fn new(attrs: &AttributeIncidence) -> Self {
        let x = attrs.incidence_matrix();
        let xt = x.transpose();
        Self {
            segments: Arc::new(attrs.segments()),
            incidence: Arc::new(x),
            incidence_t: Arc::new(xt),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    fn k2_fixture(dir: &Path) {
        write(dir, "meta.txt", "name=k2\nnum_nodes=2\nnum_attributes=1\n");
        write(dir, "edges.tsv", "0\t1\n");
        write(dir, "attrs.tsv", "0\t0\n");
    }

    #[test]
    fn loads_k2() {
        let d = tempfile::tempdir().unwrap();
        k2_fixture(d.path());
        let ds = load_dataset(d.path()).unwrap();
        assert_eq!(ds.graph.self_loop_degrees(), vec![2, 2]);
        assert_eq!(ds.attrs.attrs(0), &[0]);
        assert!(ds.attrs.attrs(1).is_empty());
    }

    #[test]
    fn rejects_self_loop_with_line_number() {
        let d = tempfile::tempdir().unwrap();
        k2_fixture(d.path());
        write(d.path(), "edges.tsv", "0\t1\n0\t0\n");
        match load_dataset(d.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_malformed_and_duplicates() {
        let d = tempfile::tempdir().unwrap();
        k2_fixture(d.path());
        write(d.path(), "edges.tsv", "0 1\n");
        assert!(matches!(load_dataset(d.path()), Err(Error::Parse { line: 1, .. })));
        k2_fixture(d.path());
        write(d.path(), "attrs.tsv", "0\t0\n0\t0\n");
        assert!(matches!(load_dataset(d.path()), Err(Error::Parse { line: 2, .. })));
        k2_fixture(d.path());
        write(d.path(), "attrs.tsv", "5\t0\n");
        assert!(matches!(load_dataset(d.path()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_ratio_edges() {
        assert_eq!(split_counts(10, (1.0, 0.0, 0.0)).unwrap(), (10, 0, 0));
        assert_eq!(split_counts(8158, (0.85, 0.05, 0.10)).unwrap(), (6936, 407, 815));
        assert!(split_counts(5, (0.9, 0.05, 0.05)).is_err());
        assert!(split_counts(5, (0.5, 0.1, 0.1)).is_err());
    }

    #[test]
    fn block_diagonal_when_degenerate() {
        let g = Graph::new(6, &[(0, 1), (2, 3)]).unwrap();
        let labels = vec![0, 0, 1, 1, 2, 2];
        let p = SynthParams {
            num_classes: 3,
            keys_per_class: 4,
            p_key: 1.0,
            p_nonkey: 0.0,
            total_attributes: 20,
            splits: (2, 2, 2),
        };
        let ds = generate_synthetic(&g, &labels, &p, 7).unwrap();
        for v in 0..6 {
            let want: Vec<usize> = (labels[v] * 4..labels[v] * 4 + 4).collect();
            assert_eq!(ds.attrs.attrs(v), want.as_slice());
        }
        let s = ds.node_split.unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (2, 2, 2));
    }

    #[test]
    fn synthetic_rejects_oversized_split() {
        let g = Graph::new(3, &[]).unwrap();
        let p = SynthParams {
            num_classes: 1,
            total_attributes: 20,
            ..SynthParams::default()
        };
        assert!(generate_synthetic(&g, &[0, 0, 0], &p, 0).is_err());
    }

    #[test]
    fn binarize_threshold_and_magnitude() {
        let f = vec![vec![0.0, 0.0], vec![0.5, 2.0], vec![-1.0, 3.0]];
        let inc = binarize(&f, BinarizeMode::Threshold(0.0)).unwrap();
        assert!(inc.attrs(0).is_empty());
        assert_eq!(inc.attrs(1), &[0, 1]);
        assert_eq!(inc.attrs(2), &[1]);
        let mag = binarize(&f, BinarizeMode::Magnitude).unwrap();
        assert_eq!(mag.attrs(2), &[0, 1]);
        assert_eq!(mag.logit_offsets().unwrap(), vec![0.5, 2.0, -1.0, 3.0]);
        assert!(binarize(&[vec![f64::NAN]], BinarizeMode::Magnitude).is_err());
    }

    #[test]
    fn dummy_attribute_fills_empty_nodes() {
        let inc = AttributeIncidence::new(2, vec![vec![1], vec![]]).unwrap();
        let d = inc.with_dummy_attribute();
        assert_eq!(d.num_attributes(), 3);
        assert_eq!(d.attrs(1), &[2]);
        assert_eq!(d.attrs(0), &[1]);
    }

    #[test]
    fn incidence_rejects_duplicates() {
        assert!(AttributeIncidence::new(3, vec![vec![1, 1]]).is_err());
        assert!(AttributeIncidence::new(3, vec![vec![3]]).is_err());
    }
}
