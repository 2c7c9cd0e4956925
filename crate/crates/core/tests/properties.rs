use std::collections::HashSet;

use overdilute::autodiff::masked_softmax_rows;
use overdilute::data::{make_link_split, AttributeIncidence};
use overdilute::dilution::{inter_agg, inter_agg_profile, quartile_subsets};
use overdilute::graph::matrix_power;
use overdilute::metrics::{dirichlet_energy, feature_corr, hits_at_k, mad};
use overdilute::model::{link_scores, Model, ModelConfig, ModelInputs, ModelKind, Task};
use overdilute::{Graph, Tensor, Trace};
use proptest::prelude::*;

fn graph_strategy(max_nodes: usize) -> impl Strategy<Value = Graph> {
    (2..=max_nodes).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..3 * n).prop_map(move |pairs| {
            let edges: Vec<_> = pairs.into_iter().filter(|(a, b)| a != b).collect();
            Graph::new(n, &edges).unwrap()
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn operator_is_symmetric(g in graph_strategy(30)) {
        let m = g.normalized_adjacency();
        let t = m.matrix();
        for v in 0..g.num_nodes() {
            for u in 0..g.num_nodes() {
                prop_assert_eq!(t.get(v, u), t.get(u, v));
            }
        }
    }

    #[test]
    fn inter_agg_matches_dense_power(g in graph_strategy(25), l in 1usize..=5) {
        let m = g.normalized_adjacency();
        let p = matrix_power(&m, l);
        let delta = inter_agg(&g, l).unwrap();
        for v in 0..g.num_nodes() {
            let row: f64 = p.matrix().row(v).iter().sum();
            let want = p.get(v, v) / row;
            prop_assert!((delta[v] - want).abs() <= 1e-10);
            prop_assert!(delta[v] > 0.0 && delta[v] <= 1.0 + 1e-15);
            if g.is_isolated(v) {
                prop_assert_eq!(delta[v], 1.0);
            }
        }
    }

    #[test]
    fn power_composes(g in graph_strategy(20), a in 0usize..4, b in 0usize..4) {
        let m = g.normalized_adjacency();
        let lhs = matrix_power(&m, a + b);
        let rhs = matrix_power(&m, a).compose(&matrix_power(&m, b));
        prop_assert!(lhs.matrix().max_abs_diff(rhs.matrix()) <= 1e-10);
    }

    #[test]
    fn receptive_fields_grow(g in graph_strategy(30)) {
        let rf = g.receptive_fields_by_hop(5);
        for v in 0..g.num_nodes() {
            for l in 1..5 {
                prop_assert!(rf[l][v] >= rf[l - 1][v]);
            }
        }
    }

    #[test]
    fn inter_agg_is_relabelling_equivariant(g in graph_strategy(20), seed in 0u64..1000) {
        let n = g.num_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let edges: Vec<_> = g.edges().iter().map(|&(a, b)| (perm[a], perm[b])).collect();
        let h = Graph::new(n, &edges).unwrap();
        let d = inter_agg_profile(&g, 3);
        let e = inter_agg_profile(&h, 3);
        for l in 0..3 {
            for v in 0..n {
                prop_assert!((d[l][v] - e[l][perm[v]]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn quartile_subsets_are_tail_sets(
        delta in proptest::collection::vec(0.0f64..=1.0, 1..60),
        raw in proptest::collection::vec((0usize..60, 0usize..60), 0..40),
    ) {
        let n = delta.len();
        let edges: Vec<_> = raw.into_iter().map(|(a, b)| (a % n, b % n)).collect();
        let q = quartile_subsets(&delta, &edges);
        prop_assert!(!q.v_q1.is_empty());
        let in1: HashSet<usize> = q.v_q1.iter().copied().collect();
        let in4: HashSet<usize> = q.v_q4.iter().copied().collect();
        for v in 0..n {
            for u in 0..n {
                if in1.contains(&v) && !in1.contains(&u) {
                    prop_assert!(delta[v] < delta[u]);
                }
                if in4.contains(&v) && !in4.contains(&u) && delta[u] != 1.0 {
                    prop_assert!(delta[v] > delta[u]);
                }
            }
            if in4.contains(&v) {
                prop_assert!(delta[v] != 1.0);
            }
        }
        for &(a, b) in &edges {
            prop_assert_eq!(q.e_q1.contains(&(a, b)), in1.contains(&a) || in1.contains(&b));
            prop_assert_eq!(q.e_q4.contains(&(a, b)), in4.contains(&a) || in4.contains(&b));
        }
    }

    #[test]
    fn hits_ignores_monotone_transforms(
        pos in proptest::collection::vec(-3.0f64..3.0, 1..30),
        neg in proptest::collection::vec(-3.0f64..3.0, 5..40),
        k in 1usize..5,
    ) {
        let f = |x: f64| (2.0 * x).exp() + x * x * x;
        let fp: Vec<f64> = pos.iter().map(|&x| f(x)).collect();
        let fneg: Vec<f64> = neg.iter().map(|&x| f(x)).collect();
        prop_assert_eq!(hits_at_k(&pos, &neg, k).unwrap(), hits_at_k(&fp, &fneg, k).unwrap());
    }

    #[test]
    fn masked_softmax_is_a_distribution(
        rows in 1usize..6,
        cols in 1usize..8,
        seed in 0u64..10_000,
    ) {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let logits = Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| 20.0 * next() - 10.0).collect());
        let mut mask: Vec<bool> = (0..rows * cols).map(|_| next() < 0.6).collect();
        for r in 0..rows {
            mask[r * cols] = true;
        }
        let p = masked_softmax_rows(&logits, Some(&mask)).unwrap();
        for r in 0..rows {
            let sum: f64 = p.row(r).iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
            for c in 0..cols {
                if !mask[r * cols + c] {
                    prop_assert_eq!(p.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn smoothness_metric_ranges(g in graph_strategy(20), seed in 0u64..1000) {
        let n = g.num_nodes();
        let mut s = seed;
        let data: Vec<f64> = (0..n * 3)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        let h = Tensor::from_vec(n, 3, data);
        let m = mad(&h, &g).unwrap();
        prop_assert!((0.0..=2.0).contains(&m.per_pair));
        prop_assert!(dirichlet_energy(&h, &g).unwrap() >= 0.0);
        let c = feature_corr(&h).unwrap().value;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c));
    }

    #[test]
    fn link_split_partitions(g in graph_strategy(40), seed in 0u64..100) {
        prop_assume!(g.num_edges() >= 20);
        let n_possible = g.num_nodes() * (g.num_nodes() - 1) / 2;
        prop_assume!(n_possible - g.num_edges() >= g.num_edges());
        let s = make_link_split(&g, (0.8, 0.1, 0.1), seed).unwrap();
        let mut all: Vec<_> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, g.edges());
        for &(a, b) in s.valid_neg.iter().chain(&s.test_neg) {
            prop_assert!(a != b && !g.has_edge(a, b));
        }
    }
}

#[test]
fn link_scores_are_symmetric() {
    let g = Graph::from_edges(&[(0, 1), (1, 2), (2, 3)]).unwrap();
    let attrs = AttributeIncidence::new(3, vec![vec![0], vec![1, 2], vec![0, 2], vec![1]]).unwrap();
    let inputs = ModelInputs::new(&g, &attrs).unwrap();
    for kind in ModelKind::ALL {
        let cfg = ModelConfig {
            hidden: 4,
            heads: 2,
            d_ffn: 8,
            ..ModelConfig::new(kind)
        };
        let model = Model::new(cfg, Task::Link, 3, 5).unwrap();
        let mut t = Trace::new();
        let b = model.params.bind(&mut t);
        let h = model.embed(&mut t, &b, &inputs, None, None).unwrap().last();
        let fwd = link_scores(&mut t, &b, h, &[(0, 3), (1, 2)]).unwrap();
        let rev = link_scores(&mut t, &b, h, &[(3, 0), (2, 1)]).unwrap();
        assert_eq!(t.value(fwd), t.value(rev), "{kind}");
    }
}
