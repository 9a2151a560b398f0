#![allow(dead_code)]

use stbalance::batch::Batch;
use stbalance::data::{synth_generate, window_sampler, zscore, SeriesTensor, SplitSpec, SynthProfile, WindowShape};
use stbalance::graph::SparseGraph;

/// A small z-scored synthetic series with its two prior graphs.
pub fn toy(nodes: usize, seed: u64) -> (SeriesTensor, Vec<SparseGraph>) {
    let s = synth_generate(nodes, 1, 5, seed, &SynthProfile::default()).unwrap();
    let series = zscore(&s.series, &SplitSpec::default(), false).unwrap().0;
    (series, vec![s.distance_graph, s.binary_graph])
}

pub fn batch(series: &SeriesTensor, t_short: usize, t_long: usize, t_out: usize, size: usize) -> Batch {
    let shape = WindowShape { t_short, t_long, t_out, stride: 5, target_feature: 0 };
    let w = window_sampler(series, shape, false).unwrap();
    let pairs: Vec<_> = (0..size).map(|i| w.get(i)).collect();
    Batch::from_pairs(&pairs).unwrap()
}

pub fn ring(n: usize) -> SparseGraph {
    let edges: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, 1.0)).collect();
    SparseGraph::undirected(n, &edges).unwrap()
}
