//! The assembled forecaster: node embedding, temporal pathway and fusion
//! stack, plus the training objective.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stb_tensor::{Graph, ParamStore, Tensor, Var};

use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, StFusion};
use crate::graph::{EmbedInit, EmbeddingParams, ReconstructionTerms, SparseGraph};
use crate::temporal::{TemporalConfig, TemporalEnhancer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub rank: usize,
    /// Add the sparse reconstruction objective to the training loss.
    pub refine: bool,
    /// Weight of the reconstruction objective in the joint loss.
    pub lambda: f64,
    pub beta: f64,
    pub negatives_per_edge: usize,
    pub init: EmbedInit,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            rank: 8,
            refine: true,
            lambda: 0.1,
            beta: 1.0,
            negatives_per_edge: 5,
            init: EmbedInit::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub temporal: TemporalConfig,
    pub fusion: FusionConfig,
    pub embedding: EmbeddingConfig,
}

/// Sizes fixed by the data rather than the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataDims {
    pub n_nodes: usize,
    pub n_features: usize,
    pub steps_per_day: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct StBalance {
    pub cfg: ModelConfig,
    pub dims: DataDims,
    pub embedding: EmbeddingParams,
    pub temporal: TemporalEnhancer,
    pub fusion: StFusion,
}

impl StBalance {
    /// Registers all parameters in `store`, initialised from `seed`.
    /// `graphs[0]` seeds a spectral initialisation when requested.
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, dims: DataDims, graphs: &[SparseGraph], seed: u64) -> Result<Self> {
        if graphs.len() != cfg.fusion.graphs {
            return Err(Error::config(
                "model.fusion.graphs",
                format!("configured for {} graphs but {} were provided", cfg.fusion.graphs, graphs.len()),
            ));
        }
        if let Some(g) = graphs.iter().find(|g| g.n_nodes() != dims.n_nodes) {
            return Err(Error::Validation(format!(
                "graph has {} nodes but the series has {}",
                g.n_nodes(),
                dims.n_nodes
            )));
        }
        if cfg.embedding.rank == 0 || cfg.embedding.rank > dims.n_nodes {
            return Err(Error::config(
                "model.embedding.rank",
                format!("rank {} must lie in 1..={}", cfg.embedding.rank, dims.n_nodes),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = EmbeddingParams::new(store, "embed", dims.n_nodes, cfg.embedding.rank, &mut rng)?;
        let temporal = TemporalEnhancer::new(store, &cfg.temporal, dims.n_features, dims.steps_per_day, &mut rng)?;
        let fusion = StFusion::new(
            store,
            &cfg.fusion,
            cfg.embedding.rank,
            cfg.temporal.d_model,
            cfg.temporal.t_out,
            &mut rng,
        )?;
        if cfg.embedding.init == EmbedInit::Spectral {
            embedding.init_spectral(store, &graphs[0])?;
        }
        Ok(StBalance {
            cfg: cfg.clone(),
            dims,
            embedding,
            temporal,
            fusion,
        })
    }

    /// Parameter count implied by the configuration alone.
    pub fn expected_params(cfg: &ModelConfig, dims: DataDims) -> usize {
        let m = cfg.embedding.rank;
        let embed = dims.n_nodes * m + 2 * (m * m + m);
        embed
            + TemporalEnhancer::expected_params(&cfg.temporal, dims.n_features, dims.steps_per_day)
            + StFusion::expected_params(&cfg.fusion, m, cfg.temporal.d_model, cfg.temporal.t_out)
    }

    /// Node embedding `H` and the normalised `[B, N, T_out]` forecast.
    pub fn forward_parts(&self, g: &mut Graph, batch: &Batch) -> Result<(Var, Var)> {
        if batch.n_nodes() != self.dims.n_nodes {
            return Err(Error::Validation(format!(
                "batch has {} nodes, model expects {}",
                batch.n_nodes(),
                self.dims.n_nodes
            )));
        }
        let h = self.embedding.forward(g)?;
        let x_final = self.temporal.forward(g, batch)?;
        let state = self.fusion.init_fusion(g, h, batch.len(), self.cfg.fusion.graphs)?;
        let (_, y) = self.fusion.stfm_forward(g, x_final, state)?;
        Ok((h, y))
    }

    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        self.forward_parts(g, batch).map(|(_, y)| y)
    }

    /// Forecast values for a batch without building gradients.
    pub fn predict(&self, store: &ParamStore, batch: &Batch) -> Result<Tensor> {
        let mut g = Graph::with_params(store);
        let y = self.forward(&mut g, batch)?;
        Ok(g.value(y).clone())
    }

    /// `Σ|ŷ − y| / denom` over the batch, so that chunks of one mini-batch
    /// sum to its mean absolute error.
    pub fn forecast_loss(&self, g: &mut Graph, batch: &Batch, denom: f64) -> Result<Var> {
        let y = self.forward(g, batch)?;
        let t = g.constant(batch.target.clone());
        let e = g.sub(y, t)?;
        let e = g.abs(e)?;
        let e = g.sum(e)?;
        Ok(g.scale(e, 1.0 / denom)?)
    }

    /// `λ ·` reconstruction objective of the current embedding.
    pub fn reconstruction_loss(&self, g: &mut Graph, terms: &ReconstructionTerms) -> Result<Var> {
        let h = self.embedding.forward(g)?;
        let r = terms.loss(g, h)?;
        Ok(g.scale(r, self.cfg.embedding.lambda)?)
    }

    /// Full objective for one batch: mean absolute error plus the weighted
    /// reconstruction term when refinement is on.
    pub fn loss(&self, g: &mut Graph, batch: &Batch, terms: Option<&ReconstructionTerms>) -> Result<Var> {
        let denom = batch.target.len() as f64;
        let (h, y) = self.forward_parts(g, batch)?;
        let t = g.constant(batch.target.clone());
        let e = g.sub(y, t)?;
        let e = g.abs(e)?;
        let e = g.sum(e)?;
        let mut loss = g.scale(e, 1.0 / denom)?;
        if let (Some(terms), true) = (terms, self.cfg.embedding.refine) {
            let r = terms.loss(g, h)?;
            let r = g.scale(r, self.cfg.embedding.lambda)?;
            loss = g.add(loss, r)?;
        }
        Ok(loss)
    }
}
