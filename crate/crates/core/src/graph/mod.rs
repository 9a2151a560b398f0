//! Prior graphs, their Laplacians and low-rank node embeddings.

mod embedding;
mod spectral;

pub use embedding::{
    fit_embedding, negative_sample, reconstruction_loss, EmbedInit, EmbeddingParams, FitConfig,
    FitResult, ReconstructionTerms,
};
pub use spectral::{spectral_embedding, SPECTRAL_MAX_NODES};

use std::collections::HashMap;
use std::path::Path;

use stb_tensor::Tensor;

use crate::data::csv_err;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub u: usize,
    pub v: usize,
    pub w: f64,
}

/// Edge-list graph. Undirected graphs store each edge once, so `(v, u)`
/// duplicates `(u, v)`.
#[derive(Debug, Clone)]
pub struct SparseGraph {
    n_nodes: usize,
    edges: Vec<Edge>,
    directed: bool,
    index: HashMap<(usize, usize), usize>,
}

impl PartialEq for SparseGraph {
    fn eq(&self, other: &Self) -> bool {
        self.n_nodes == other.n_nodes && self.directed == other.directed && self.edges == other.edges
    }
}

impl SparseGraph {
    pub fn new(n_nodes: usize, edges: Vec<Edge>, directed: bool) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::Validation("graph needs at least one node".into()));
        }
        let mut index = HashMap::with_capacity(edges.len());
        for (i, e) in edges.iter().enumerate() {
            if e.u >= n_nodes || e.v >= n_nodes {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) references a node outside 0..{n_nodes}",
                    e.u, e.v
                )));
            }
            if !(e.w.is_finite() && e.w >= 0.0) {
                return Err(Error::Validation(format!(
                    "edge ({}, {}) has invalid weight {}",
                    e.u, e.v, e.w
                )));
            }
            let key = Self::key(directed, e.u, e.v);
            if index.insert(key, i).is_some() {
                return Err(Error::Validation(format!("duplicate edge ({}, {})", e.u, e.v)));
            }
        }
        Ok(SparseGraph {
            n_nodes,
            edges,
            directed,
            index,
        })
    }

    /// Builds an undirected graph from `(u, v, w)` triples.
    pub fn undirected(n_nodes: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let edges = edges.iter().map(|&(u, v, w)| Edge { u, v, w }).collect();
        Self::new(n_nodes, edges, false)
    }

    fn key(directed: bool, u: usize, v: usize) -> (usize, usize) {
        if directed || u <= v {
            (u, v)
        } else {
            (v, u)
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Weight of `(u, v)`; for undirected graphs either orientation matches.
    pub fn weight(&self, u: usize, v: usize) -> Option<f64> {
        self.index
            .get(&Self::key(self.directed, u, v))
            .map(|&i| self.edges[i].w)
    }

    /// True when `u` and `v` are joined in either direction.
    pub fn connected(&self, u: usize, v: usize) -> bool {
        self.weight(u, v).is_some() || (self.directed && self.weight(v, u).is_some())
    }

    /// Undirected closure, taking `max(w_uv, w_vu)` for reciprocal pairs.
    pub fn symmetrized(&self) -> SparseGraph {
        if !self.directed {
            return self.clone();
        }
        let mut merged: HashMap<(usize, usize), f64> = HashMap::new();
        let mut order = Vec::new();
        for e in &self.edges {
            let key = Self::key(false, e.u, e.v);
            match merged.get_mut(&key) {
                Some(w) => *w = w.max(e.w),
                None => {
                    merged.insert(key, e.w);
                    order.push(key);
                }
            }
        }
        let edges = order
            .into_iter()
            .map(|(u, v)| Edge { u, v, w: merged[&(u, v)] })
            .collect();
        SparseGraph::new(self.n_nodes, edges, false).expect("closure of a valid graph is valid")
    }

    /// Same topology with every weight set to 1.
    pub fn binarized(&self) -> SparseGraph {
        let edges = self.edges.iter().map(|e| Edge { w: 1.0, ..*e }).collect();
        SparseGraph::new(self.n_nodes, edges, self.directed).expect("binarizing keeps validity")
    }

    /// Relabels node `i` as `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<SparseGraph> {
        if perm.len() != self.n_nodes {
            return Err(Error::Validation("permutation length differs from node count".into()));
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge { u: perm[e.u], v: perm[e.v], w: e.w })
            .collect();
        SparseGraph::new(self.n_nodes, edges, self.directed)
    }

    /// Weighted degree of every node in the symmetric closure.
    pub fn strength(&self) -> Vec<f64> {
        let sym = self.symmetrized();
        let mut s = vec![0.0; self.n_nodes];
        for e in &sym.edges {
            s[e.u] += e.w;
            if e.u != e.v {
                s[e.v] += e.w;
            }
        }
        s
    }

    /// Symmetric adjacency of the closure in CSR form (no diagonal unless
    /// self-loops exist).
    pub fn adjacency(&self) -> CsrMatrix {
        let sym = self.symmetrized();
        let mut triplets = Vec::with_capacity(2 * sym.edges.len());
        for e in &sym.edges {
            triplets.push((e.u, e.v, e.w));
            if e.u != e.v {
                triplets.push((e.v, e.u, e.w));
            }
        }
        CsrMatrix::from_triplets(self.n_nodes, triplets)
    }

    /// Row-normalised neighbour lists `(j, w_ij / s_i)` of the closure,
    /// excluding self-loops.
    pub fn transition_rows(&self) -> Vec<Vec<(usize, f64)>> {
        let adj = self.adjacency();
        (0..self.n_nodes)
            .map(|i| {
                let row: Vec<(usize, f64)> = adj.row(i).filter(|&(j, _)| j != i).collect();
                let total: f64 = row.iter().map(|&(_, w)| w).sum();
                if total > 0.0 {
                    row.into_iter().map(|(j, w)| (j, w / total)).collect()
                } else {
                    Vec::new()
                }
            })
            .collect()
    }

    pub fn read_csv(path: &Path, n_nodes: Option<usize>, directed: bool) -> Result<Self> {
        #[derive(serde::Deserialize)]
        struct Row {
            src: usize,
            dst: usize,
            weight: f64,
        }
        let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
            return Err(Error::parse(path, "line 1", "expected header `src,dst,weight`"));
        }
        let mut edges = Vec::new();
        let mut max_id = 0;
        for rec in rdr.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let line = rec.position().map_or(0, |p| p.line());
            let row: Row = rec
                .deserialize(Some(&headers))
                .map_err(|e| Error::parse(path, format!("line {line}"), e.to_string()))?;
            max_id = max_id.max(row.src).max(row.dst);
            edges.push(Edge { u: row.src, v: row.dst, w: row.weight });
        }
        let n = n_nodes.unwrap_or(max_id + 1);
        SparseGraph::new(n, edges, directed).map_err(|e| match e {
            Error::Validation(msg) => Error::parse(path, "edges", msg),
            other => other,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["src", "dst", "weight"]).map_err(|e| csv_err(path, e))?;
        for e in &self.edges {
            w.write_record([e.u.to_string(), e.v.to_string(), format!("{:?}", e.w)])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Compressed sparse rows, columns sorted within each row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl CsrMatrix {
    /// Duplicate coordinates are summed.
    pub fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_by_key(|&(i, j, _)| (i, j));
        let mut row_ptr = vec![0; n + 1];
        let mut cols: Vec<usize> = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in t {
            if last == Some((i, j)) {
                *vals.last_mut().unwrap() += v;
                continue;
            }
            last = Some((i, j));
            row_ptr[i + 1] += 1;
            cols.push(j);
            vals.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        CsrMatrix { n, row_ptr, cols, vals }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).map(|(j, v)| v * x[j]).sum()).collect()
    }

    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut data = vec![0.0; self.n * self.n];
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                data[i * self.n + j] = v;
            }
        }
        Tensor::new(vec![self.n, self.n], data).expect("square matrix")
    }
}

/// `L = D − A` of the symmetric closure. Self-loops cancel and do not appear.
pub fn build_laplacian(g: &SparseGraph) -> Result<CsrMatrix> {
    if let Some(e) = g.edges().iter().find(|e| !(e.w >= 0.0)) {
        return Err(Error::Validation(format!("negative weight on edge ({}, {})", e.u, e.v)));
    }
    let sym = g.symmetrized();
    let mut degree = vec![0.0; g.n_nodes()];
    let mut t = Vec::with_capacity(2 * sym.n_edges() + g.n_nodes());
    for e in sym.edges().iter().filter(|e| e.u != e.v) {
        degree[e.u] += e.w;
        degree[e.v] += e.w;
        t.push((e.u, e.v, -e.w));
        t.push((e.v, e.u, -e.w));
    }
    for (i, &d) in degree.iter().enumerate() {
        if d != 0.0 {
            t.push((i, i, d));
        }
    }
    Ok(CsrMatrix::from_triplets(g.n_nodes(), t))
}

/// Low-rank node representation `[N, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbedding {
    pub h: Tensor,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Spectral,
    Learned,
}

impl NodeEmbedding {
    pub fn n_nodes(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.h.row(i)
    }

    pub fn dot(&self, u: usize, v: usize) -> f64 {
        self.row(u).iter().zip(self.row(v)).map(|(a, b)| a * b).sum()
    }

    pub fn cosine(&self, u: usize, v: usize) -> f64 {
        let nu = self.dot(u, u).sqrt();
        let nv = self.dot(v, v).sqrt();
        if nu == 0.0 || nv == 0.0 {
            0.0
        } else {
            self.dot(u, v) / (nu * nv)
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["node_id".to_string()];
        header.extend((0..self.rank()).map(|k| format!("h_{k}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for i in 0..self.n_nodes() {
            let mut rec = vec![i.to_string()];
            rec.extend(self.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
