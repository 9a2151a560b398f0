//! Spatial and temporal entropy estimators and their mismatch.
//!
//! Spatial entropy is the Shannon entropy of the weighted-degree
//! distribution; temporal entropy is the per-node equal-width histogram
//! entropy of the trailing window, averaged over nodes. Both are in nats.

use std::path::Path;

use crate::data::{csv_err, SeriesTensor};
use crate::error::{Error, Result};
use crate::graph::SparseGraph;

pub const DEFAULT_BINS: usize = 16;

/// Shannon entropy of a non-negative weight vector, normalised to sum 1.
fn shannon(weights: impl Iterator<Item = f64> + Clone) -> f64 {
    let total: f64 = weights.clone().sum();
    -weights
        .filter(|&w| w > 0.0)
        .map(|w| {
            let p = w / total;
            p * p.ln()
        })
        .sum::<f64>()
}

pub fn spatial_entropy(g: &SparseGraph) -> Result<f64> {
    let s = g.strength();
    let total: f64 = s.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Diagnostic("graph has no positive edge weight".into()));
    }
    Ok(shannon(s.iter().copied()).max(0.0))
}

/// Histogram entropy of one sequence over its own min–max range.
pub fn histogram_entropy(values: &[f64], bins: usize) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    shannon(counts.iter().map(|&c| c as f64)).max(0.0)
}

/// Mean over nodes of the histogram entropy of the last `window` values of
/// feature 0.
pub fn temporal_entropy(x: &SeriesTensor, window: usize, bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Diagnostic(format!("need at least 2 bins, got {bins}")));
    }
    if window == 0 || window > x.n_steps() {
        return Err(Error::Diagnostic(format!(
            "window {window} outside 1..={} steps",
            x.n_steps()
        )));
    }
    let start = x.n_steps() - window;
    let total: f64 = (0..x.n_nodes())
        .map(|n| histogram_entropy(&x.node_series(n, 0)[start..], bins))
        .sum();
    Ok(total / x.n_nodes() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyReport {
    pub h_spatial: f64,
    pub windows: Vec<usize>,
    pub h_temporal: Vec<f64>,
    pub mismatch: Vec<f64>,
    pub n_nodes: usize,
    pub bins: usize,
}

impl EntropyReport {
    /// The window with the smallest mismatch; ties go to the earliest.
    pub fn recommended(&self) -> usize {
        let mut best = 0;
        for (i, &m) in self.mismatch.iter().enumerate() {
            if m < self.mismatch[best] {
                best = i;
            }
        }
        self.windows[best]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["window", "h_spatial", "h_temporal", "mismatch", "n_nodes"])
            .map_err(|e| csv_err(path, e))?;
        for i in 0..self.windows.len() {
            w.write_record([
                self.windows[i].to_string(),
                format!("{:.12}", self.h_spatial),
                format!("{:.12}", self.h_temporal[i]),
                format!("{:.12}", self.mismatch[i]),
                self.n_nodes.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn mismatch_report(g: &SparseGraph, x: &SeriesTensor, windows: &[usize], bins: usize) -> Result<EntropyReport> {
    if windows.is_empty() {
        return Err(Error::Diagnostic("no windows given".into()));
    }
    let h_spatial = spatial_entropy(g)?;
    let h_temporal = windows
        .iter()
        .map(|&w| temporal_entropy(x, w, bins))
        .collect::<Result<Vec<_>>>()?;
    let mismatch = h_temporal.iter().map(|h| (h_spatial - h).abs()).collect();
    Ok(EntropyReport {
        h_spatial,
        windows: windows.to_vec(),
        h_temporal,
        mismatch,
        n_nodes: g.n_nodes(),
        bins,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use stb_tensor::Tensor;

    #[test]
    fn single_edge_is_ln2() {
        let g = SparseGraph::undirected(2, &[(0, 1, 3.0)]).unwrap();
        assert!((spatial_entropy(&g).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn star_by_hand() {
        let g = SparseGraph::undirected(4, &[(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)]).unwrap();
        let want = 0.5 * 2f64.ln() + 0.5 * 6f64.ln();
        assert!((spatial_entropy(&g).unwrap() - want).abs() < 1e-12);
        assert!((want - 1.2425).abs() < 1e-4);
    }

    #[test]
    fn empty_graph_is_an_error() {
        let g = SparseGraph::undirected(3, &[]).unwrap();
        assert!(matches!(spatial_entropy(&g), Err(Error::Diagnostic(_))));
    }

    #[test]
    fn six_two_split() {
        let v = [0.0, 0.0, 0.0, 0.1, 0.2, 0.3, 1.0, 0.9];
        let want = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((histogram_entropy(&v, 2) - want).abs() < 1e-12);
        assert!((want - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn window_range_checked() {
        let x = SeriesTensor::new(Tensor::zeros(&[2, 5, 1])).unwrap();
        assert!(temporal_entropy(&x, 6, 4).is_err());
        assert_eq!(temporal_entropy(&x, 5, 4).unwrap(), 0.0);
    }
}
