//! Evaluation metrics: Hits@K, accuracy, and representation smoothness.

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Fraction of positives scoring strictly above the `k`-th largest negative.
pub fn hits_at_k(pos: &[f64], neg: &[f64], k: usize) -> Result<f64> {
    if k == 0 || neg.len() < k {
        return Err(Error::Contract(format!(
            "hits@{k} needs at least {k} negatives, got {}",
            neg.len()
        )));
    }
    if pos.is_empty() {
        return Err(Error::Contract("hits@k needs at least one positive".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let thr = sorted[k - 1];
    Ok(pos.iter().filter(|&&p| p > thr).count() as f64 / pos.len() as f64)
}

/// Share of `rows` whose arg-max logit equals the label. Ties go to the lowest class.
pub fn accuracy(logits: &Tensor, labels: &[usize], rows: &[usize]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let hit = rows
        .iter()
        .filter(|&&r| {
            let row = logits.row(r);
            let mut best = 0;
            for (c, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = c;
                }
            }
            best == labels[r]
        })
        .count();
    hit as f64 / rows.len() as f64
}

/// Mean cosine distance between adjacent representations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mad {
    /// Sum of `1 − cos` divided by the number of ordered adjacent pairs.
    pub per_pair: f64,
    /// The same sum divided by `|V|`.
    pub per_node: f64,
    /// Ordered pairs skipped because one side has a zero row.
    pub skipped: usize,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn mad(h: &Tensor, g: &Graph) -> Result<Mad> {
    check_rows(h, g)?;
    let norms: Vec<f64> = (0..h.rows()).map(|v| norm(h.row(v))).collect();
    let (mut total, mut pairs, mut skipped) = (0.0, 0usize, 0usize);
    for v in 0..g.num_nodes() {
        for &u in g.neighbors(v) {
            if norms[v] == 0.0 || norms[u] == 0.0 {
                skipped += 1;
                continue;
            }
            let dot: f64 = h.row(v).iter().zip(h.row(u)).map(|(a, b)| a * b).sum();
            total += 1.0 - dot / (norms[v] * norms[u]);
            pairs += 1;
        }
    }
    Ok(Mad {
        per_pair: if pairs == 0 { 0.0 } else { total / pairs as f64 },
        per_node: if g.num_nodes() == 0 { 0.0 } else { total / g.num_nodes() as f64 },
        skipped,
    })
}

/// Mean squared Euclidean gap over adjacent pairs.
pub fn dirichlet_energy(h: &Tensor, g: &Graph) -> Result<f64> {
    check_rows(h, g)?;
    let (mut total, mut pairs) = (0.0, 0usize);
    for (v, u) in g.edges() {
        total += h
            .row(v)
            .iter()
            .zip(h.row(u))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        pairs += 1;
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Mean absolute Pearson correlation over distinct column pairs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureCorr {
    pub value: f64,
    pub constant_columns: usize,
}

pub fn feature_corr(h: &Tensor) -> Result<FeatureCorr> {
    let (n, d) = (h.rows(), h.cols());
    if d < 2 || n < 2 {
        return Err(Error::Contract("feature_corr needs at least 2 rows and 2 columns".into()));
    }
    let mut centred = vec![vec![0.0; n]; d];
    let mut sd = vec![0.0; d];
    for (j, col) in centred.iter_mut().enumerate() {
        let mean = (0..n).map(|i| h.get(i, j)).sum::<f64>() / n as f64;
        for (i, c) in col.iter_mut().enumerate() {
            *c = h.get(i, j) - mean;
        }
        sd[j] = norm(col);
    }
    let live: Vec<usize> = (0..d).filter(|&j| sd[j] > 1e-12 * (1.0 + sd[j])).collect();
    let constant_columns = d - live.len();
    let (mut total, mut pairs) = (0.0, 0usize);
    for (a, &i) in live.iter().enumerate() {
        for &j in &live[a + 1..] {
            let dot: f64 = centred[i].iter().zip(&centred[j]).map(|(x, y)| x * y).sum();
            total += (dot / (sd[i] * sd[j])).abs().min(1.0);
            pairs += 1;
        }
    }
    Ok(FeatureCorr {
        value: if pairs == 0 { 0.0 } else { total / pairs as f64 },
        constant_columns,
    })
}

fn check_rows(h: &Tensor, g: &Graph) -> Result<()> {
    if h.rows() != g.num_nodes() {
        return Err(Error::Dimension {
            op: "metric",
            detail: format!("{} rows for {} nodes", h.rows(), g.num_nodes()),
        });
    }
    Ok(())
}
