//! Undirected graph topology, GCN normalisation and propagation powers.

use std::collections::VecDeque;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::par;
use crate::sparse::{Segments, SparseMatrix};
use crate::tensor::Tensor;

/// Immutable undirected graph in compressed adjacency form.
///
/// Self-loops are never stored; the closed neighbourhood `Ñ(v) = N(v) ∪ {v}`
/// is implicit, and `self_loop_degree(v) = |N(v)| + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

impl Graph {
    /// Builds a symmetric, deduplicated graph on `num_nodes` nodes.
    pub fn new(num_nodes: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); num_nodes];
        for &(u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Format(format!(
                    "edge ({u},{v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::Format(format!("self-loop edge ({u},{u})")));
            }
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut offsets = Vec::with_capacity(num_nodes + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        for mut list in adj {
            list.sort_unstable();
            list.dedup();
            neighbors.extend(list);
            offsets.push(neighbors.len());
        }
        Ok(Self { offsets, neighbors })
    }

    /// Builds from an edge list with `num_nodes = max id + 1`.
    pub fn from_edges(edges: &[(usize, usize)]) -> Result<Self> {
        let n = edges.iter().map(|&(u, v)| u.max(v) + 1).max().unwrap_or(0);
        Self::new(n, edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.neighbors.len() / 2
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// `deg̃(v) = |N(v)| + 1`.
    pub fn self_loop_degree(&self, v: usize) -> usize {
        self.degree(v) + 1
    }

    pub fn self_loop_degrees(&self) -> Vec<usize> {
        (0..self.num_nodes()).map(|v| self.self_loop_degree(v)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn is_isolated(&self, v: usize) -> bool {
        self.degree(v) == 0
    }

    /// Undirected edges with `u < v`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes() {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// GCN coefficient `α_vu = 1/√(deg̃(v)·deg̃(u))` (for `u = v`, `1/deg̃(v)`).
    pub fn gcn_coefficient(&self, v: usize, u: usize) -> f64 {
        if u == v {
            1.0 / self.self_loop_degree(v) as f64
        } else {
            1.0 / ((self.self_loop_degree(v) * self.self_loop_degree(u)) as f64).sqrt()
        }
    }

    /// `D̃^{-1/2} Ã D̃^{-1/2}` as a sparse operator, self entry first in each row.
    pub fn gcn_operator(&self) -> SparseMatrix {
        let rows: Vec<Vec<(usize, f64)>> = (0..self.num_nodes())
            .map(|v| {
                std::iter::once(v)
                    .chain(self.neighbors(v).iter().copied())
                    .map(|u| (u, self.gcn_coefficient(v, u)))
                    .collect()
            })
            .collect();
        SparseMatrix::from_rows(self.num_nodes(), &rows)
    }

    /// Closed neighbourhoods `Ñ(v)` as segments, self first.
    pub fn closed_neighborhoods(&self) -> Segments {
        let lists: Vec<Vec<usize>> = (0..self.num_nodes())
            .map(|v| {
                std::iter::once(v)
                    .chain(self.neighbors(v).iter().copied())
                    .collect()
            })
            .collect();
        Segments::from_lists(&lists, self.num_nodes())
    }

    /// Dense one-hop propagation matrix `M¹`.
    pub fn normalized_adjacency(&self) -> PropagationMatrix {
        PropagationMatrix {
            matrix: self.gcn_operator().to_dense(),
            hops: 1,
        }
    }

    /// `|B_l(v)|` for every node by breadth-first search truncated at depth `hops`.
    pub fn receptive_field_sizes(&self, hops: usize) -> Vec<usize> {
        par::map_range(self.num_nodes(), |v| self.ball_size(v, hops))
    }

    fn ball_size(&self, source: usize, hops: usize) -> usize {
        let mut dist = vec![usize::MAX; self.num_nodes()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        let mut count = 1;
        while let Some(v) = queue.pop_front() {
            if dist[v] == hops {
                continue;
            }
            for &u in self.neighbors(v) {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    count += 1;
                    queue.push_back(u);
                }
            }
        }
        count
    }

    /// Receptive-field sizes for every hop `1..=max_hops`: `out[l-1][v]`.
    pub fn receptive_fields_by_hop(&self, max_hops: usize) -> Vec<Vec<usize>> {
        let per_node: Vec<Vec<usize>> = par::map_range(self.num_nodes(), |v| {
            let mut dist = vec![usize::MAX; self.num_nodes()];
            dist[v] = 0;
            let mut counts = vec![0usize; max_hops + 1];
            counts[0] = 1;
            let mut queue = VecDeque::from([v]);
            while let Some(x) = queue.pop_front() {
                if dist[x] == max_hops {
                    continue;
                }
                for &u in self.neighbors(x) {
                    if dist[u] == usize::MAX {
                        dist[u] = dist[x] + 1;
                        counts[dist[u]] += 1;
                        queue.push_back(u);
                    }
                }
            }
            let mut acc = 0;
            counts
                .iter()
                .map(|c| {
                    acc += c;
                    acc
                })
                .skip(1)
                .collect()
        });
        (0..max_hops)
            .map(|l| per_node.iter().map(|c| c[l]).collect())
            .collect()
    }

    /// Same graph restricted to the given undirected edges (node set unchanged).
    pub fn with_edges(&self, edges: &[(usize, usize)]) -> Result<Graph> {
        Graph::new(self.num_nodes(), edges)
    }
}

/// Column `M^l e_v` for `l = 1..=max_hops`, by sparse propagation.
///
/// `M` is symmetric, so this column is also row `v` of `M^l`.
pub fn propagate_unit(op: &SparseMatrix, v: usize, max_hops: usize) -> Vec<Vec<f64>> {
    let mut x = vec![0.0; op.rows()];
    x[v] = 1.0;
    let mut out = Vec::with_capacity(max_hops);
    for _ in 0..max_hops {
        x = op.mul_vec(&x);
        out.push(x.clone());
    }
    out
}

/// Dense `M^l = (D̃^{-1/2} Ã D̃^{-1/2})^l`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationMatrix {
    matrix: Tensor,
    hops: usize,
}

impl PropagationMatrix {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn hops(&self) -> usize {
        self.hops
    }

    pub fn get(&self, v: usize, u: usize) -> f64 {
        self.matrix.get(v, u)
    }

    /// `M^l` for a one-hop matrix by repeated multiplication; `l = 0` gives the
    /// identity.
    pub fn power(&self, l: usize) -> PropagationMatrix {
        let n = self.matrix.rows();
        let mut acc = Tensor::eye(n);
        for _ in 0..l {
            acc = acc.matmul(&self.matrix).expect("square");
        }
        PropagationMatrix {
            matrix: acc,
            hops: self.hops * l,
        }
    }

    pub fn compose(&self, other: &PropagationMatrix) -> PropagationMatrix {
        PropagationMatrix {
            matrix: self.matrix.matmul(&other.matrix).expect("square"),
            hops: self.hops + other.hops,
        }
    }
}

/// `M^l` from a one-hop matrix.
pub fn matrix_power(m: &PropagationMatrix, l: usize) -> PropagationMatrix {
    m.power(l)
}

/// Shared sparse GCN operator with its transpose, ready for the trace.
#[derive(Clone, Debug)]
pub struct GcnOperator {
    pub forward: Arc<SparseMatrix>,
    pub transpose: Arc<SparseMatrix>,
}

impl GcnOperator {
    pub fn new(g: &Graph) -> Self {
        let m = g.gcn_operator();
        let t = m.transpose();
        Self {
            forward: Arc::new(m),
            transpose: Arc::new(t),
        }
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
    fn k2_degrees() {
        let g = Graph::from_edges(&[(0, 1)]).unwrap();
        assert_eq!(g.self_loop_degrees(), vec![2, 2]);
    }

    #[test]
    fn star_degrees() {
        assert_eq!(star(3).self_loop_degrees(), vec![4, 2, 2, 2]);
    }

    #[test]
    fn duplicate_edges_collapse() {
        let g = Graph::from_edges(&[(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.neighbors(0), &[1]);
        assert_eq!(g.neighbors(1), &[0]);
        assert_eq!(g.num_edges(), 1);
    }

    #[test]
    fn rejects_self_loop_and_range() {
        assert!(matches!(Graph::new(2, &[(1, 1)]), Err(Error::Format(_))));
        assert!(matches!(Graph::new(2, &[(0, 2)]), Err(Error::Format(_))));
    }

    #[test]
    fn k2_normalized() {
        let g = Graph::from_edges(&[(0, 1)]).unwrap();
        let m = g.normalized_adjacency();
        assert_eq!(m.matrix().data(), &[0.5, 0.5, 0.5, 0.5]);
        assert_eq!(m.power(2).matrix().data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn star_center_coefficients() {
        let m = star(3).normalized_adjacency();
        assert_eq!(m.get(0, 0), 0.25);
        assert!((m.get(0, 1) - 1.0 / 8f64.sqrt()).abs() < 1e-15);
        assert!((m.get(0, 1) - 0.35355).abs() < 1e-5);
    }

    #[test]
    fn power_one_and_zero() {
        let m = star(4).normalized_adjacency();
        assert_eq!(m.power(1).matrix(), m.matrix());
        assert_eq!(m.power(0).matrix(), &Tensor::eye(5));
    }

    #[test]
    fn receptive_fields() {
        let p3 = Graph::from_edges(&[(0, 1), (1, 2)]).unwrap();
        assert_eq!(p3.receptive_field_sizes(1)[1], 3);
        assert_eq!(p3.receptive_field_sizes(0), vec![1, 1, 1]);
        let iso = Graph::new(3, &[(0, 1)]).unwrap();
        for l in 0..4 {
            assert_eq!(iso.receptive_field_sizes(l)[2], 1);
        }
        let by_hop = p3.receptive_fields_by_hop(2);
        assert_eq!(by_hop[0], vec![2, 3, 2]);
        assert_eq!(by_hop[1], vec![3, 3, 3]);
    }

    #[test]
    fn unit_propagation_matches_dense_columns() {
        let g = Graph::from_edges(&[(0, 1), (1, 2), (2, 3), (1, 3), (3, 4)]).unwrap();
        let m = g.normalized_adjacency();
        let op = g.gcn_operator();
        for v in 0..5 {
            let cols = propagate_unit(&op, v, 3);
            for (l, col) in cols.iter().enumerate() {
                let p = m.power(l + 1);
                for u in 0..5 {
                    assert!((col[u] - p.get(u, v)).abs() < 1e-14);
                }
            }
        }
    }
}
