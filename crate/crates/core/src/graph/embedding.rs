use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stb_tensor::{Adam, Graph, Linear, ParamId, ParamStore, Tensor, Var};

use super::{build_laplacian, spectral_embedding, NodeEmbedding, Provenance, SparseGraph};
use crate::error::{Error, Result};

/// Learnable table `E` refined by a residual two-layer map:
/// `H = E + FC₂(relu(FC₁ E))`.
#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub e: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
    pub n_nodes: usize,
    pub rank: usize,
}

impl EmbeddingParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_nodes: usize,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 || rank > n_nodes {
            return Err(Error::config("embed_rank", format!("rank {rank} must lie in 1..={n_nodes}")));
        }
        let e = store.add_uniform(format!("{name}.table"), &[n_nodes, rank], rank, rng)?;
        Ok(EmbeddingParams {
            e,
            fc1: Linear::new(store, &format!("{name}.fc1"), rank, rank, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), rank, rank, rng)?,
            n_nodes,
            rank,
        })
    }

    pub fn num_params(&self) -> usize {
        self.n_nodes * self.rank + self.fc1.num_params() + self.fc2.num_params()
    }

    pub fn forward(&self, g: &mut Graph) -> Result<Var> {
        let e = g.param(self.e);
        let h = self.fc1.forward(g, e)?;
        let h = g.relu(h)?;
        let h = self.fc2.forward(g, h)?;
        Ok(g.add(e, h)?)
    }

    /// Evaluates `H` for the current parameter values.
    pub fn embed_nodes(&self, store: &ParamStore) -> Result<NodeEmbedding> {
        let mut g = Graph::with_params(store);
        let h = self.forward(&mut g)?;
        Ok(NodeEmbedding {
            h: g.value(h).clone(),
            provenance: Provenance::Learned,
        })
    }

    /// Starts from `E = H_spec` with the refinement contributing nothing.
    pub fn init_spectral(&self, store: &mut ParamStore, graph: &SparseGraph) -> Result<()> {
        let spec = spectral_embedding(&build_laplacian(graph)?, self.rank)?;
        store.set(self.e, spec.h)?;
        self.fc2.zero(store);
        Ok(())
    }
}

/// `count` distinct unordered non-adjacent pairs `u < v`, uniformly without
/// replacement.
pub fn negative_sample(g: &SparseGraph, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    negative_sample_with(g, count, &mut rng)
}

fn adjacent_pairs(g: &SparseGraph) -> HashSet<(usize, usize)> {
    g.edges()
        .iter()
        .filter(|e| e.u != e.v)
        .map(|e| (e.u.min(e.v), e.u.max(e.v)))
        .collect()
}

fn available_non_edges(g: &SparseGraph) -> usize {
    let n = g.n_nodes();
    n * (n - 1) / 2 - adjacent_pairs(g).len()
}

fn negative_sample_with<R: Rng>(g: &SparseGraph, count: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let n = g.n_nodes();
    let adjacent = adjacent_pairs(g);
    let available = n * (n - 1) / 2 - adjacent.len();
    if count > available {
        return Err(Error::Sampling(format!(
            "requested {count} negative pairs but the graph has only {available} non-edges"
        )));
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    if 4 * count >= available {
        // Dense regime: enumerate the complement once.
        let pool: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|p| !adjacent.contains(p))
            .collect();
        return Ok(index::sample(rng, pool.len(), count).into_iter().map(|i| pool[i]).collect());
    }
    let mut chosen = HashSet::with_capacity(count);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u == v {
            continue;
        }
        let p = (u.min(v), u.max(v));
        if !adjacent.contains(&p) && chosen.insert(p) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Index lists for the sparse reconstruction objective
/// `Σ_E (A_uv − h_u·h_v)² + β Σ_N (h_u·h_v)²`.
#[derive(Debug, Clone)]
pub struct ReconstructionTerms {
    edge_u: Vec<usize>,
    edge_v: Vec<usize>,
    edge_w: Vec<f64>,
    neg_u: Vec<usize>,
    neg_v: Vec<usize>,
    pub beta: f64,
}

impl ReconstructionTerms {
    pub fn new(g: &SparseGraph, negatives: &[(usize, usize)], beta: f64) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::config("embedding.beta", format!("must be non-negative, got {beta}")));
        }
        if let Some(&(u, v)) = negatives.iter().find(|&&(u, v)| g.connected(u, v)) {
            return Err(Error::Validation(format!("negative pair ({u}, {v}) is an edge")));
        }
        if let Some(&(u, v)) = negatives.iter().find(|&&(u, v)| u >= g.n_nodes() || v >= g.n_nodes()) {
            return Err(Error::Validation(format!("negative pair ({u}, {v}) out of range")));
        }
        Ok(ReconstructionTerms {
            edge_u: g.edges().iter().map(|e| e.u).collect(),
            edge_v: g.edges().iter().map(|e| e.v).collect(),
            edge_w: g.edges().iter().map(|e| e.w).collect(),
            neg_u: negatives.iter().map(|p| p.0).collect(),
            neg_v: negatives.iter().map(|p| p.1).collect(),
            beta,
        })
    }

    pub fn n_edges(&self) -> usize {
        self.edge_u.len()
    }

    pub fn n_negatives(&self) -> usize {
        self.neg_u.len()
    }

    fn dots(g: &mut Graph, h: Var, u: &[usize], v: &[usize]) -> Result<Var> {
        let hu = g.gather(h, u)?;
        let hv = g.gather(h, v)?;
        let p = g.mul(hu, hv)?;
        Ok(g.sum_last(p)?)
    }

    /// Edge part only, on the tape.
    pub fn edge_loss(&self, g: &mut Graph, h: Var) -> Result<Var> {
        if self.edge_u.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let d = Self::dots(g, h, &self.edge_u, &self.edge_v)?;
        let a = g.constant(Tensor::from_vec(self.edge_w.clone()));
        let r = g.sub(a, d)?;
        let r = g.square(r)?;
        Ok(g.sum(r)?)
    }

    /// Full objective on the tape; cost is linear in `|E| + |N|`.
    pub fn loss(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let edge = self.edge_loss(g, h)?;
        if self.neg_u.is_empty() || self.beta == 0.0 {
            return Ok(edge);
        }
        let d = Self::dots(g, h, &self.neg_u, &self.neg_v)?;
        let d = g.square(d)?;
        let d = g.sum(d)?;
        let d = g.scale(d, self.beta)?;
        Ok(g.add(edge, d)?)
    }
}

/// Value of the reconstruction objective for a fixed embedding.
pub fn reconstruction_loss(
    h: &NodeEmbedding,
    g: &SparseGraph,
    negatives: &[(usize, usize)],
    beta: f64,
) -> Result<f64> {
    if h.n_nodes() != g.n_nodes() {
        return Err(Error::Validation(format!(
            "embedding has {} rows for a {}-node graph",
            h.n_nodes(),
            g.n_nodes()
        )));
    }
    let terms = ReconstructionTerms::new(g, negatives, beta)?;
    let mut tape = Graph::new();
    let hv = tape.constant(h.h.clone());
    let loss = terms.loss(&mut tape, hv)?;
    Ok(tape.value(loss).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedInit {
    Random,
    Spectral,
}

#[derive(Debug, Clone)]
pub struct FitConfig {
    pub rank: usize,
    pub beta: f64,
    pub negatives_per_edge: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub init: EmbedInit,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            rank: 2,
            beta: 1.0,
            negatives_per_edge: 5,
            epochs: 500,
            lr: 0.01,
            seed: 0,
            init: EmbedInit::Random,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub embedding: NodeEmbedding,
    /// Objective before each update, then once after the last.
    pub trace: Vec<f64>,
    /// Edge-only reconstruction error of the final embedding.
    pub edge_loss: f64,
    pub store: ParamStore,
    pub params: EmbeddingParams,
}

/// Minimises the reconstruction objective with Adam, drawing fresh
/// negatives every epoch (capped at the number of non-edges).
pub fn fit_embedding(g: &SparseGraph, cfg: &FitConfig) -> Result<FitResult> {
    if cfg.epochs == 0 {
        return Err(Error::config("embedding.epochs", "must be at least 1"));
    }
    if !(cfg.lr > 0.0) {
        return Err(Error::config("embedding.lr", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let params = EmbeddingParams::new(&mut store, "embed", g.n_nodes(), cfg.rank, &mut rng)?;
    if cfg.init == EmbedInit::Spectral {
        params.init_spectral(&mut store, g)?;
    }
    let n_neg = (cfg.negatives_per_edge * g.n_edges()).min(available_non_edges(g));
    let mut adam = Adam::new(store.num_scalars(), cfg.lr);
    let mut trace = Vec::with_capacity(cfg.epochs + 1);
    let objective = |store: &ParamStore, negatives: &[(usize, usize)]| -> Result<(f64, Vec<f64>)> {
        let terms = ReconstructionTerms::new(g, negatives, cfg.beta)?;
        let mut tape = Graph::with_params(store);
        let h = params.forward(&mut tape)?;
        let loss = terms.loss(&mut tape, h)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).item(), grads.flat(store)))
    };
    for epoch in 0..cfg.epochs {
        let negatives = negative_sample_with(g, n_neg, &mut rng)?;
        let (loss, grads) = objective(&store, &negatives).map_err(|e| diverged(epoch, e))?;
        if !loss.is_finite() || grads.iter().any(|v| !v.is_finite()) {
            return Err(diverged(epoch, Error::Validation("non-finite loss".into())));
        }
        trace.push(loss);
        let mut flat = store.flatten();
        adam.step(&mut flat, &grads);
        store.assign_flat(&flat)?;
    }
    let embedding = params.embed_nodes(&store).map_err(|e| diverged(cfg.epochs, e))?;
    let final_negatives = negative_sample_with(g, n_neg, &mut rng)?;
    let final_loss = reconstruction_loss(&embedding, g, &final_negatives, cfg.beta)?;
    if !final_loss.is_finite() {
        return Err(diverged(cfg.epochs, Error::Validation("non-finite loss".into())));
    }
    trace.push(final_loss);
    let edge_loss = reconstruction_loss(&embedding, g, &[], 0.0)?;
    Ok(FitResult {
        embedding,
        trace,
        edge_loss,
        store,
        params,
    })
}

fn diverged(epoch: usize, e: Error) -> Error {
    Error::Training {
        epoch,
        batch: 0,
        msg: format!("embedding fit: {e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_has_no_negatives() {
        let g = SparseGraph::undirected(3, &[(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)]).unwrap();
        assert!(matches!(negative_sample(&g, 1, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn path_has_one_forced_negative() {
        let g = SparseGraph::undirected(3, &[(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(negative_sample(&g, 1, 42).unwrap(), vec![(0, 2)]);
    }

    #[test]
    fn zeroed_refinement_is_identity_on_table() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EmbeddingParams::new(&mut store, "e", 4, 2, &mut rng).unwrap();
        p.fc1.zero(&mut store);
        p.fc2.zero(&mut store);
        let h = p.embed_nodes(&store).unwrap();
        assert_eq!(&h.h, store.get(p.e));
    }

    #[test]
    fn zero_table_gives_fc2_bias_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = EmbeddingParams::new(&mut store, "e", 3, 2, &mut rng).unwrap();
        store.get_mut(p.e).data_mut().fill(0.0);
        store.get_mut(p.fc1.b).data_mut().fill(0.0);
        let bias = store.get(p.fc2.b).data().to_vec();
        let h = p.embed_nodes(&store).unwrap();
        for i in 0..3 {
            assert_eq!(h.row(i), bias.as_slice());
        }
    }

    #[test]
    fn loss_hand_cases() {
        let g = SparseGraph::undirected(2, &[(0, 1, 1.0)]).unwrap();
        let ortho = NodeEmbedding {
            h: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            provenance: Provenance::Learned,
        };
        assert_eq!(reconstruction_loss(&ortho, &g, &[], 1.0).unwrap(), 1.0);
        let exact = NodeEmbedding {
            h: Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap(),
            provenance: Provenance::Learned,
        };
        assert_eq!(reconstruction_loss(&exact, &g, &[], 1.0).unwrap(), 0.0);
        let empty = SparseGraph::undirected(2, &[]).unwrap();
        let half = NodeEmbedding {
            h: Tensor::new(vec![2, 1], vec![1.0, 0.5]).unwrap(),
            provenance: Provenance::Learned,
        };
        assert_eq!(reconstruction_loss(&half, &empty, &[(0, 1)], 1.0).unwrap(), 0.25);
        assert!(matches!(
            reconstruction_loss(&half, &g, &[(1, 0)], 1.0),
            Err(Error::Validation(_))
        ));
    }
}
