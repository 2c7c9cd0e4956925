//! Intra- and inter-node dilution factors.
//!
//! The aggregation-only inter factor is computed from powers of the GCN
//! propagation matrix `M = D̃^{-1/2} Ã D̃^{-1/2}`:
//! `δ(v) = (M^l)_vv / Σ_u (M^l)_vu`. Because `M` is symmetric, row `v` of
//! `M^l` equals `M^l e_v`, so every node is handled by `l` sparse
//! products from its unit vector, independently of the others.
//! The model-based factor goes through [`crate::jacobian`] instead and is the
//! independent check on the closed form.

use crate::autodiff::{Trace, Var};
use crate::error::{Error, Result};
use crate::graph::{propagate_unit, Graph};
use crate::jacobian::jacobian_influence;
use crate::par;
use crate::tensor::Tensor;
use crate::data::AttributeIncidence;

/// One `(node, attribute)` intra factor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntraFactor {
    pub node: usize,
    pub attr: usize,
    pub delta: f64,
}

/// Uniform `1/|T_v|` factors of a sum/mean-pooling MPNN. Attribute-less nodes
/// are skipped and returned separately.
pub fn intra_mpnn(attrs: &AttributeIncidence) -> (Vec<IntraFactor>, Vec<usize>) {
    let mut out = Vec::with_capacity(attrs.nnz());
    let mut flagged = Vec::new();
    for v in 0..attrs.num_nodes() {
        let set = attrs.attrs(v);
        if set.is_empty() {
            flagged.push(v);
            continue;
        }
        let d = 1.0 / set.len() as f64;
        out.extend(set.iter().map(|&t| IntraFactor {
            node: v,
            attr: t,
            delta: d,
        }));
    }
    (out, flagged)
}

/// Attention-based intra factors `softmax_{t ∈ T_v}(scale · q_v · k_t)`.
///
/// `queries` is `N_V × d`, `keys` is `N_T × d`. Returns one vector per node,
/// aligned with `attrs.attrs(v)`.
pub fn intra_natr(
    queries: &Tensor,
    keys: &Tensor,
    attrs: &AttributeIncidence,
    scale: f64,
) -> Result<Vec<Vec<f64>>> {
    if queries.rows() != attrs.num_nodes() || keys.rows() != attrs.num_attributes() || queries.cols() != keys.cols() {
        return Err(Error::Dimension {
            op: "intra_natr",
            detail: "query/key shapes vs incidence".into(),
        });
    }
    (0..attrs.num_nodes())
        .map(|v| {
            let set = attrs.attrs(v);
            if set.is_empty() {
                return Err(Error::DegenerateRow { row: v });
            }
            let q = queries.row(v);
            let logits: Vec<f64> = set
                .iter()
                .map(|&t| scale * q.iter().zip(keys.row(t)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            Ok(e.into_iter().map(|x| x / z).collect())
        })
        .collect()
}

/// Diagonal and row sums of `M^l` for `l = 1..=max_hops`: `(diag[l-1][v], rowsum[l-1][v])`.
fn power_diag_rowsum(g: &Graph, max_hops: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let op = g.gcn_operator();
    let per_node: Vec<Vec<(f64, f64)>> = par::map_range(g.num_nodes(), |v| {
        propagate_unit(&op, v, max_hops)
            .into_iter()
            .map(|col| (col[v], col.iter().sum()))
            .collect()
    });
    let diag = (0..max_hops)
        .map(|l| per_node.iter().map(|p| p[l].0).collect())
        .collect();
    let rows = (0..max_hops)
        .map(|l| per_node.iter().map(|p| p[l].1).collect())
        .collect();
    (diag, rows)
}

/// Aggregation-only inter factor at `l` hops for every node.
pub fn inter_agg(g: &Graph, l: usize) -> Result<Vec<f64>> {
    if l == 0 {
        return Err(Error::Contract("inter_agg needs l >= 1".into()));
    }
    Ok(inter_agg_profile(g, l).pop().expect("l >= 1"))
}

/// Aggregation-only inter factors for hops `1..=max_hops`: `out[l-1][v]`.
pub fn inter_agg_profile(g: &Graph, max_hops: usize) -> Vec<Vec<f64>> {
    let (diag, rows) = power_diag_rowsum(g, max_hops);
    diag.into_iter()
        .zip(rows)
        .map(|(d, r)| d.into_iter().zip(r).map(|(a, b)| a / b).collect())
        .collect()
}

/// Single-layer closed form `α_vv / Σ_{u∈Ñ(v)} α_vu` from GCN coefficients.
pub fn inter_agg_single_layer(g: &Graph) -> Vec<f64> {
    (0..g.num_nodes())
        .map(|v| {
            let self_c = 1.0 / g.self_loop_degree(v) as f64;
            let others: f64 = g.neighbors(v).iter().map(|&u| g.gcn_coefficient(v, u)).sum();
            self_c / (self_c + others)
        })
        .collect()
}

/// Numerator split of the aggregation-only factor into the part never sent
/// away, `(1/deg̃(v))^l`, and the part returned by neighbours, `(M^l)_vv − preserved`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NumeratorSplit {
    pub preserved: f64,
    pub returned: f64,
}

pub fn inter_agg_decomposition(g: &Graph, l: usize) -> Result<Vec<NumeratorSplit>> {
    if l == 0 {
        return Err(Error::Contract("decomposition needs l >= 1".into()));
    }
    Ok(decomposition_profile(g, l).pop().expect("l >= 1"))
}

/// Decompositions for hops `1..=max_hops`.
pub fn decomposition_profile(g: &Graph, max_hops: usize) -> Vec<Vec<NumeratorSplit>> {
    let (diag, _) = power_diag_rowsum(g, max_hops);
    diag.into_iter()
        .enumerate()
        .map(|(i, d)| {
            let l = i as i32 + 1;
            d.into_iter()
                .enumerate()
                .map(|(v, mvv)| {
                    let preserved = (1.0 / g.self_loop_degree(v) as f64).powi(l);
                    // Rounding can leave a -1e-17 residue at l = 1.
                    let returned = if l == 1 { 0.0 } else { (mvv - preserved).max(0.0) };
                    NumeratorSplit { preserved, returned }
                })
                .collect()
        })
        .collect()
}

/// Normalised self-influence `I_v(v) / Σ_u I_v(u)` for each node in `nodes`
/// of a traced model `forward(trace, h0) -> output`.
pub fn inter_model<F>(h0: &Tensor, nodes: &[usize], forward: F) -> Result<Vec<f64>>
where
    F: FnOnce(&mut Trace, Var) -> Result<Var>,
{
    let mut trace = Trace::new();
    let input = trace.param(h0.clone());
    let out = forward(&mut trace, input)?;
    inter_from_trace(&trace, out, input, nodes)
}

/// Same as [`inter_model`] for an already recorded trace.
pub fn inter_from_trace(trace: &Trace, out: Var, input: Var, nodes: &[usize]) -> Result<Vec<f64>> {
    if trace.value(out).rows() != trace.value(input).rows() {
        return Err(Error::Contract(
            "model output must have one row per input node".into(),
        ));
    }
    let inf = jacobian_influence(trace, out, nodes, input)?;
    nodes
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let row = inf.row(k);
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                return Err(Error::Contract(format!(
                    "output row {v} does not depend on the input"
                )));
            }
            Ok(row[v] / total)
        })
        .collect()
}

/// Inter factor with extra self terms: for each node `v`,
/// `(I_v(v) + S_v) / (Σ_u I_v(u) + S_v)` where
/// `S_v = Σ_m Σ |∂out_v / ∂extra_m[v]|` over the given intermediate nodes.
///
/// With `extra` set to the per-layer attribute mixtures `O^(m)`, this is the
/// NATR inter factor.
pub fn inter_with_self_terms(
    trace: &Trace,
    out: Var,
    input: Var,
    extra: &[Var],
    nodes: &[usize],
) -> Result<Vec<f64>> {
    let base = jacobian_influence(trace, out, nodes, input)?;
    let ov = trace.value(out);
    let (n_out, d_out) = (ov.rows(), ov.cols());
    let self_terms: Vec<Result<f64>> = par::map_slice(nodes, |&v| {
        let mut s = 0.0;
        for i in 0..d_out {
            let mut seed = Tensor::zeros(n_out, d_out);
            seed.set(v, i, 1.0);
            let grads = trace.backward_from(out, seed)?;
            for &m in extra {
                if let Some(g) = grads.get(m) {
                    s += g.row(v).iter().map(|x| x.abs()).sum::<f64>();
                }
            }
        }
        Ok(s)
    });
    nodes
        .iter()
        .enumerate()
        .zip(self_terms)
        .map(|((k, &v), s)| {
            let s = s?;
            let row = base.row(k);
            let total: f64 = row.iter().sum::<f64>() + s;
            if total == 0.0 {
                return Err(Error::Contract(format!("output row {v} is constant")));
            }
            Ok((row[v] + s) / total)
        })
        .collect()
}

/// `δ̄ = (δ − 1/|T_v|) / (1/|T_v|) · 100` for factors aligned with `attrs`.
pub fn relative_intra_change(factors: &[Vec<f64>], attrs: &AttributeIncidence) -> Result<Vec<Vec<f64>>> {
    if factors.len() != attrs.num_nodes() {
        return Err(Error::Dimension {
            op: "relative_intra_change",
            detail: "node count".into(),
        });
    }
    factors
        .iter()
        .enumerate()
        .map(|(v, f)| {
            if f.len() != attrs.attrs(v).len() {
                return Err(Error::Dimension {
                    op: "relative_intra_change",
                    detail: format!("node {v}: {} factors, {} attributes", f.len(), attrs.attrs(v).len()),
                });
            }
            let base = 1.0 / f.len() as f64;
            Ok(f.iter().map(|d| (d - base) / base * 100.0).collect())
        })
        .collect()
}

/// Counts of `δ̄` in 10-point bins: enhanced `(0,10], …, (90,100], (100,∞)`
/// and suppressed `(−10,0], …, (−100,−90]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntraChangeSummary {
    pub enhanced: Vec<(String, usize)>,
    pub suppressed: Vec<(String, usize)>,
    pub enhanced_share: f64,
    pub median_gain: Option<f64>,
    pub max_gain: Option<f64>,
    pub median_loss: Option<f64>,
    pub min_loss: Option<f64>,
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

pub fn summarize_intra_change(changes: &[Vec<f64>]) -> IntraChangeSummary {
    let all: Vec<f64> = changes.iter().flatten().copied().collect();
    let mut pos: Vec<f64> = all.iter().copied().filter(|&x| x > 0.0).collect();
    let mut neg: Vec<f64> = all.iter().copied().filter(|&x| x <= 0.0).collect();
    let mut enhanced: Vec<(String, usize)> = (0..10)
        .map(|i| (format!("+{}%~+{}%", i * 10, (i + 1) * 10), 0))
        .collect();
    enhanced.push(("+100%~".into(), 0));
    let mut suppressed: Vec<(String, usize)> = (0..10)
        .map(|i| (format!("-{}%~-{}%", i * 10, (i + 1) * 10), 0))
        .collect();
    for &x in &pos {
        let b = ((x / 10.0).ceil() as usize).saturating_sub(1).min(10);
        enhanced[b].1 += 1;
    }
    for &x in &neg {
        let b = ((-x / 10.0).floor() as usize).min(9);
        suppressed[b].1 += 1;
    }
    IntraChangeSummary {
        enhanced,
        suppressed,
        enhanced_share: if all.is_empty() { 0.0 } else { pos.len() as f64 / all.len() as f64 },
        median_gain: median(&mut pos),
        max_gain: pos.last().copied(),
        median_loss: median(&mut neg),
        min_loss: neg.first().copied(),
    }
}

/// Node and edge subsets of the most and least diluted nodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QuartileSubsets {
    pub v_q1: Vec<usize>,
    pub v_q4: Vec<usize>,
    pub e_q1: Vec<(usize, usize)>,
    pub e_q4: Vec<(usize, usize)>,
}

/// Nearest-rank quantile: the sorted value at 1-based rank `round(p·n)`
/// (clamped to `1..=n`).
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).round() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// `V_Q1 = {δ ≤ Q1}`, `V_Q4 = {δ ≥ Q3, δ ≠ 1}`; edge subsets hold the edges of
/// `edges` with at least one endpoint in the node subset.
pub fn quartile_subsets(delta: &[f64], edges: &[(usize, usize)]) -> QuartileSubsets {
    if delta.is_empty() {
        return QuartileSubsets::default();
    }
    let mut sorted = delta.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = nearest_rank(&sorted, 0.25);
    let q3 = nearest_rank(&sorted, 0.75);
    let in_q1: Vec<bool> = delta.iter().map(|&d| d <= q1).collect();
    let in_q4: Vec<bool> = delta.iter().map(|&d| d >= q3 && d != 1.0).collect();
    let pick = |mask: &[bool]| -> (Vec<usize>, Vec<(usize, usize)>) {
        let nodes = (0..mask.len()).filter(|&v| mask[v]).collect();
        let es = edges
            .iter()
            .copied()
            .filter(|&(a, b)| mask[a] || mask[b])
            .collect();
        (nodes, es)
    };
    let (v_q1, e_q1) = pick(&in_q1);
    let (v_q4, e_q4) = pick(&in_q4);
    QuartileSubsets {
        v_q1,
        v_q4,
        e_q1,
        e_q4,
    }
}

/// Fixed-width histogram over `[0, 1]`; the value 1 falls in the last bin.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(Error::Contract("histogram needs at least one bin".into()));
    }
    let mut counts = vec![0; bins];
    for &x in values {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::Contract(format!("value {x} outside [0,1]")));
        }
        let b = ((x * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    Ok(Histogram { edges, counts })
}

/// Mean over all nodes and over non-isolated nodes.
pub fn averages(values: &[f64], g: &Graph) -> (f64, f64) {
    let all = values.iter().sum::<f64>() / values.len().max(1) as f64;
    let non_iso: Vec<f64> = (0..g.num_nodes())
        .filter(|&v| !g.is_isolated(v))
        .map(|v| values[v])
        .collect();
    let ni = if non_iso.is_empty() {
        f64::NAN
    } else {
        non_iso.iter().sum::<f64>() / non_iso.len() as f64
    };
    (all, ni)
}

/// Everything the analysis command emits for one graph.
#[derive(Clone, Debug)]
pub struct DilutionReport {
    /// `inter[l-1][v]` for `l = 1..=hops`.
    pub inter: Vec<Vec<f64>>,
    pub receptive: Vec<Vec<usize>>,
    pub decomposition: Vec<Vec<NumeratorSplit>>,
    pub intra: Vec<IntraFactor>,
    /// `δ̄` per intra entry (0 for the MPNN baseline).
    pub intra_change: Vec<f64>,
    pub attributeless: Vec<usize>,
    pub histograms: Vec<Histogram>,
    pub subsets: Option<QuartileSubsets>,
}

impl DilutionReport {
    pub fn compute(g: &Graph, attrs: &AttributeIncidence, hops: usize, bins: usize) -> Result<Self> {
        if hops == 0 {
            return Err(Error::Contract("hops must be >= 1".into()));
        }
        let inter = inter_agg_profile(g, hops);
        let receptive = g.receptive_fields_by_hop(hops);
        let decomposition = decomposition_profile(g, hops);
        let (intra, attributeless) = intra_mpnn(attrs);
        let intra_change = vec![0.0; intra.len()];
        let histograms = inter
            .iter()
            .map(|h| histogram(h, bins))
            .collect::<Result<Vec<_>>>()?;
        let subsets = (hops >= 2).then(|| quartile_subsets(&inter[1], &g.edges()));
        Ok(Self {
            inter,
            receptive,
            decomposition,
            intra,
            intra_change,
            attributeless,
            histograms,
            subsets,
        })
    }

    /// Replaces the intra section with attention-based factors.
    pub fn set_intra(&mut self, attrs: &AttributeIncidence, factors: &[Vec<f64>]) -> Result<()> {
        let change = relative_intra_change(factors, attrs)?;
        self.intra.clear();
        self.intra_change.clear();
        for v in 0..attrs.num_nodes() {
            for (k, &t) in attrs.attrs(v).iter().enumerate() {
                self.intra.push(IntraFactor {
                    node: v,
                    attr: t,
                    delta: factors[v][k],
                });
                self.intra_change.push(change[v][k]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn star(leaves: usize) -> Graph {
        let edges: Vec<_> = (1..=leaves).map(|l| (0, l)).collect();
        Graph::from_edges(&edges).unwrap()
    }

    #[test]
    fn uniform_intra_factors() {
        let attrs = AttributeIncidence::new(5, vec![vec![0, 1, 2, 3], vec![4], vec![]]).unwrap();
        let (f, flagged) = intra_mpnn(&attrs);
        assert_eq!(flagged, vec![2]);
        assert!(f.iter().filter(|e| e.node == 0).all(|e| e.delta == 0.25));
        assert_eq!(f.iter().find(|e| e.node == 1).unwrap().delta, 1.0);
    }

    #[test]
    fn computers_like_node() {
        // Median node of the Computers data: 204 attributes, degree 19.
        let attrs = AttributeIncidence::new(204, vec![(0..204).collect()]).unwrap();
        let (f, _) = intra_mpnn(&attrs);
        assert!((f[0].delta - 0.0049).abs() < 1e-4);
        let combined = f[0].delta * (1.0 / 20.0);
        assert!((combined * 100.0 - 0.025).abs() < 0.001);
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let attrs = AttributeIncidence::new(3, vec![vec![0, 1, 2]]).unwrap();
        let q = Tensor::from_vec(1, 2, vec![0.7, -0.3]);
        let k = Tensor::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let f = intra_natr(&q, &k, &attrs, 1.0).unwrap();
        for x in &f[0] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn aligned_key_saturates() {
        let attrs = AttributeIncidence::new(3, vec![vec![0, 1, 2]]).unwrap();
        let q = Tensor::from_vec(1, 2, vec![50.0, 0.0]);
        let k = Tensor::from_vec(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let f = intra_natr(&q, &k, &attrs, 1.0).unwrap();
        assert!(f[0][0] > 1.0 - 1e-12);
        let empty = AttributeIncidence::new(3, vec![vec![]]).unwrap();
        assert!(matches!(
            intra_natr(&q, &k, &empty, 1.0),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn inter_agg_small_cases() {
        let iso = Graph::new(3, &[(0, 1)]).unwrap();
        for l in 1..=4 {
            assert_eq!(inter_agg(&iso, l).unwrap()[2], 1.0);
        }
        let k2 = Graph::from_edges(&[(0, 1)]).unwrap();
        assert_eq!(inter_agg(&k2, 1).unwrap(), vec![0.5, 0.5]);
        let s = inter_agg(&star(3), 1).unwrap();
        let want = 0.25 / (0.25 + 3.0 / 8f64.sqrt());
        assert!((s[0] - want).abs() < 1e-15);
        assert!((s[0] - 0.190744).abs() < 1e-6);
        assert!(inter_agg(&k2, 0).is_err());
    }

    #[test]
    fn decomposition_k2() {
        let k2 = Graph::from_edges(&[(0, 1)]).unwrap();
        let d1 = inter_agg_decomposition(&k2, 1).unwrap();
        assert!(d1.iter().all(|s| s.returned == 0.0 && s.preserved == 0.5));
        let d2 = inter_agg_decomposition(&k2, 2).unwrap();
        for s in d2 {
            assert!((s.preserved - 0.25).abs() < 1e-15);
            assert!((s.returned - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn quartiles_small_example() {
        let d = [0.1, 0.2, 0.8, 0.9, 1.0];
        let edges = [(0, 2), (1, 2), (3, 4)];
        let q = quartile_subsets(&d, &edges);
        assert_eq!(q.v_q1, vec![0]);
        assert_eq!(q.v_q4, vec![3]);
        assert_eq!(q.e_q1, vec![(0, 2)]);
        assert_eq!(q.e_q4, vec![(3, 4)]);
    }

    #[test]
    fn quartiles_all_equal() {
        let d = [0.3, 0.3, 0.3, 1.0];
        let q = quartile_subsets(&[0.3, 0.3, 0.3], &[]);
        assert_eq!(q.v_q1, vec![0, 1, 2]);
        assert_eq!(q.v_q4, vec![0, 1, 2]);
        let q = quartile_subsets(&[1.0, 1.0], &[]);
        assert_eq!(q.v_q1, vec![0, 1]);
        assert!(q.v_q4.is_empty());
        let _ = d;
    }

    #[test]
    fn relative_change_values() {
        let attrs = AttributeIncidence::new(4, vec![vec![0, 1, 2, 3]]).unwrap();
        let c = relative_intra_change(&[vec![0.25, 0.5, 0.125, 0.125]], &attrs).unwrap();
        assert_eq!(c[0], vec![0.0, 100.0, -50.0, -50.0]);
        let s = summarize_intra_change(&c);
        assert_eq!(s.enhanced[9].1, 1);
        assert_eq!(s.suppressed[5].1, 2);
        assert_eq!(s.suppressed[0].1, 1);
        assert_eq!(s.median_gain, Some(100.0));
    }

    #[test]
    fn histogram_cases() {
        let h = histogram(&[0.1, 0.3, 0.6, 0.9], 4).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        let h = histogram(&[1.0, 1.0], 10).unwrap();
        assert_eq!(h.counts[9], 2);
        assert_eq!(h.edges.len(), 11);
        assert!(histogram(&[1.5], 2).is_err());
    }
}
