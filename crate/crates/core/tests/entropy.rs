mod common;

use proptest::prelude::*;
use stb_tensor::Tensor;
use stbalance::data::SeriesTensor;
use stbalance::entropy::{histogram_entropy, mismatch_report, spatial_entropy, temporal_entropy};
use stbalance::graph::SparseGraph;

fn complete(n: usize, w: f64) -> SparseGraph {
    let edges: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v, w))).collect();
    SparseGraph::undirected(n, &edges).unwrap()
}

#[test]
fn regular_graphs_reach_ln_n() {
    for n in [3, 5, 9, 16] {
        let ln = (n as f64).ln();
        assert!((spatial_entropy(&common::ring(n)).unwrap() - ln).abs() < 1e-12);
        assert!((spatial_entropy(&complete(n, 0.3)).unwrap() - ln).abs() < 1e-12);
    }
    // Two disjoint 2-regular rings form one 2-regular graph.
    let mut edges: Vec<_> = (0..5).map(|i| (i, (i + 1) % 5, 1.0)).collect();
    edges.extend((0..7).map(|i| (5 + i, 5 + (i + 1) % 7, 1.0)));
    let g = SparseGraph::undirected(12, &edges).unwrap();
    assert!((spatial_entropy(&g).unwrap() - 12f64.ln()).abs() < 1e-12);
}

#[test]
fn irregular_graph_is_below_ln_n() {
    let star = SparseGraph::undirected(5, &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0), (0, 4, 1.0)]).unwrap();
    assert!(spatial_entropy(&star).unwrap() < 5f64.ln() - 0.1);
}

proptest! {
    #[test]
    fn spatial_entropy_ignores_labels_and_scale(
        raw in prop::collection::vec((0usize..8, 0usize..8, 0.1f64..4.0), 1..20),
        scale in 0.01f64..100.0,
        seed in 0u64..1000,
    ) {
        let mut edges: Vec<_> = raw.into_iter().filter(|(u, v, _)| u < v).collect();
        prop_assume!(!edges.is_empty());
        edges.sort_by_key(|e| (e.0, e.1));
        edges.dedup_by_key(|e| (e.0, e.1));
        let g = SparseGraph::undirected(8, &edges).unwrap();
        let h = spatial_entropy(&g).unwrap();
        prop_assert!(h >= 0.0 && h <= 8f64.ln() + 1e-12);
        let scaled: Vec<_> = edges.iter().map(|&(u, v, w)| (u, v, w * scale)).collect();
        let hs = spatial_entropy(&SparseGraph::undirected(8, &scaled).unwrap()).unwrap();
        prop_assert!((h - hs).abs() < 1e-12);
        let mut perm: Vec<usize> = (0..8).collect();
        perm.rotate_left((seed % 8) as usize);
        perm.swap(0, (seed as usize / 8) % 8);
        let hp = spatial_entropy(&g.permuted(&perm).unwrap()).unwrap();
        prop_assert!((h - hp).abs() < 1e-12);
    }

    #[test]
    fn histogram_entropy_is_affine_invariant_and_bounded(
        v in prop::collection::vec(-10.0f64..10.0, 2..200),
        a in 0.5f64..20.0,
        b in -100.0f64..100.0,
        bins in 2usize..32,
    ) {
        let h = histogram_entropy(&v, bins);
        prop_assert!(h >= 0.0 && h <= (bins as f64).ln() + 1e-12);
        // Exact bin edges can move under rounding, so compare counts loosely.
        let w: Vec<f64> = v.iter().map(|x| a * x + b).collect();
        let hw = histogram_entropy(&w, bins);
        prop_assert!((h - hw).abs() < 0.2, "{} vs {}", h, hw);
    }
}

#[test]
fn temporal_entropy_uses_the_trailing_window() {
    // Constant history followed by a two-valued tail.
    let mut data = vec![1.0; 100];
    for (i, v) in data[90..].iter_mut().enumerate() {
        *v = (i % 2) as f64;
    }
    let x = SeriesTensor::new(Tensor::new(vec![1, 100, 1], data).unwrap()).unwrap();
    assert!((temporal_entropy(&x, 10, 4).unwrap() - 2f64.ln()).abs() < 1e-12);
    assert!(temporal_entropy(&x, 100, 4).unwrap() < 2f64.ln());
    assert!(temporal_entropy(&x, 101, 4).is_err());
    assert!(temporal_entropy(&x, 10, 1).is_err());
}

#[test]
fn recommendation_is_the_first_minimum() {
    let x = SeriesTensor::new(Tensor::new(vec![1, 64, 1], (0..64).map(|i| (i % 4) as f64).collect()).unwrap()).unwrap();
    let g = common::ring(4);
    let report = mismatch_report(&g, &x, &[4, 8, 16, 64], 4).unwrap();
    // Every window sees all four levels equally often: H_T = ln 4 = H_S.
    assert!(report.mismatch.iter().all(|m| m.abs() < 1e-12));
    assert_eq!(report.recommended(), 4);
    assert!(mismatch_report(&g, &x, &[], 4).is_err());
}
