//! Stacked spatiotemporal fusion layers.
//!
//! Each layer fuses the temporal features with every graph's spatial
//! features through a shared residual MLP and graph-specific heads, merges
//! the per-graph results, and gates the spatial features for the next layer
//! with attention over channel chunks of each node (nodes never mix).

use rand::Rng;
use serde::{Deserialize, Serialize};
use stb_tensor::{Graph, Linear, MultiHeadAttention, ParamStore, RmlpStack, Tensor, TensorError, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub layers: usize,
    /// Number of prior graphs.
    pub graphs: usize,
    pub d_s: usize,
    pub d_m: usize,
    /// Channel chunks per node attended over by the feedback gate.
    pub gate_tokens: usize,
    /// Residual blocks in each single-graph fusion stack.
    pub sf_depth: usize,
    /// Residual blocks in each multi-graph fusion stack.
    pub mf_depth: usize,
    /// Feed the temporal features to the output head alongside the fused state.
    pub head_skip: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            layers: 2,
            graphs: 2,
            d_s: 16,
            d_m: 16,
            gate_tokens: 4,
            sf_depth: 1,
            mf_depth: 1,
            head_skip: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("model.fusion.layers", self.layers),
            ("model.fusion.graphs", self.graphs),
            ("model.fusion.d_s", self.d_s),
            ("model.fusion.d_m", self.d_m),
            ("model.fusion.gate_tokens", self.gate_tokens),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.d_s != self.d_m {
            return Err(Error::config(
                "model.fusion.d_m",
                format!("gated feedback needs d_m == d_s, got d_m {} and d_s {}", self.d_m, self.d_s),
            ));
        }
        if self.d_s % self.gate_tokens != 0 {
            return Err(Error::config(
                "model.fusion.gate_tokens",
                format!("d_s {} is not divisible by {} tokens", self.d_s, self.gate_tokens),
            ));
        }
        Ok(())
    }

    fn sf_width(&self, d_model: usize) -> usize {
        d_model + self.d_s + self.d_m
    }
}

#[derive(Debug, Clone)]
pub struct FeedbackGate {
    pub attn: MultiHeadAttention,
    pub fc: Linear,
    pub tokens: usize,
}

#[derive(Debug, Clone)]
pub struct FusionLayer {
    /// Shared across graphs.
    pub sf: RmlpStack,
    /// One head per graph.
    pub sf_heads: Vec<Linear>,
    pub mf: RmlpStack,
    pub mf_out: Linear,
    /// Absent on the last layer, whose spatial update would be unused.
    pub gate: Option<FeedbackGate>,
}

/// Per-graph spatial features and the fused state entering layer `layer`.
#[derive(Debug, Clone)]
pub struct FusionState {
    pub spatial: Vec<Var>,
    pub fused: Var,
    pub layer: usize,
}

#[derive(Debug, Clone)]
pub struct StFusion {
    pub cfg: FusionConfig,
    pub d_model: usize,
    pub rank: usize,
    /// Graph-specific maps from the node embedding to spatial features.
    pub phi: Vec<Linear>,
    pub layers: Vec<FusionLayer>,
    pub head: Linear,
}

fn activation_error(layer: usize, graph: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteActivation { layer, graph },
        other => other,
    }
}

impl StFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &FusionConfig,
        rank: usize,
        d_model: usize,
        t_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let phi = (0..cfg.graphs)
            .map(|j| Linear::new(store, &format!("fusion.phi{j}"), rank, cfg.d_s, rng))
            .collect::<std::result::Result<_, _>>()?;
        let w = cfg.sf_width(d_model);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let p = format!("fusion.{i}");
            let sf = RmlpStack::new(store, &format!("{p}.sf"), w, cfg.sf_depth, rng)?;
            let sf_heads = (0..cfg.graphs)
                .map(|j| Linear::new(store, &format!("{p}.sf_head{j}"), w, cfg.d_m, rng))
                .collect::<std::result::Result<_, _>>()?;
            let mf = RmlpStack::new(store, &format!("{p}.mf"), cfg.graphs * cfg.d_m, cfg.mf_depth, rng)?;
            let mf_out = Linear::new(store, &format!("{p}.mf_out"), cfg.graphs * cfg.d_m, cfg.d_m, rng)?;
            let gate = if i + 1 < cfg.layers {
                let chunk = cfg.d_s / cfg.gate_tokens;
                Some(FeedbackGate {
                    attn: MultiHeadAttention::new(store, &format!("{p}.gate.attn"), chunk, 1, rng)?,
                    fc: Linear::new(store, &format!("{p}.gate.fc"), cfg.d_s, cfg.d_s, rng)?,
                    tokens: cfg.gate_tokens,
                })
            } else {
                None
            };
            layers.push(FusionLayer { sf, sf_heads, mf, mf_out, gate });
        }
        let head_in = cfg.d_m + if cfg.head_skip { d_model } else { 0 };
        let head = Linear::new(store, "fusion.head", head_in, t_out, rng)?;
        Ok(StFusion {
            cfg: cfg.clone(),
            d_model,
            rank,
            phi,
            layers,
            head,
        })
    }

    /// Parameter count implied by the configuration alone.
    pub fn expected_params(cfg: &FusionConfig, rank: usize, d_model: usize, t_out: usize) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let (j, w) = (cfg.graphs, cfg.sf_width(d_model));
        let chunk = cfg.d_s / cfg.gate_tokens;
        let per_layer = cfg.sf_depth * 2 * lin(w, w)
            + j * lin(w, cfg.d_m)
            + cfg.mf_depth * 2 * lin(j * cfg.d_m, j * cfg.d_m)
            + lin(j * cfg.d_m, cfg.d_m);
        let gate = 4 * lin(chunk, chunk) + lin(cfg.d_s, cfg.d_s);
        let head_in = cfg.d_m + if cfg.head_skip { d_model } else { 0 };
        j * lin(rank, cfg.d_s) + cfg.layers * per_layer + (cfg.layers - 1) * gate + lin(head_in, t_out)
    }

    /// `G₀ʲ = φʲ(H)` broadcast over the batch and `M₀ = 0`.
    pub fn init_fusion(&self, g: &mut Graph, h: Var, batch: usize, graphs: usize) -> Result<FusionState> {
        if graphs != self.cfg.graphs {
            return Err(Error::config(
                "model.fusion.graphs",
                format!("configured for {} graphs but {graphs} were provided", self.cfg.graphs),
            ));
        }
        let hs = g.shape(h).to_vec();
        if hs.len() != 2 || hs[1] != self.rank {
            return Err(Error::Validation(format!(
                "embedding shape {hs:?} does not have rank {}",
                self.rank
            )));
        }
        let n = hs[0];
        let spatial = self
            .phi
            .iter()
            .map(|phi| {
                let x = phi.forward(g, h)?;
                Ok(g.repeat(x, batch)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let fused = g.constant(Tensor::zeros(&[batch, n, self.cfg.d_m]));
        Ok(FusionState { spatial, fused, layer: 0 })
    }

    /// `S = FCᵢʲ(SFᵢ([X ∥ Gʲ ∥ M]))`.
    pub fn single_fusion(&self, g: &mut Graph, x_final: Var, spatial: Var, fused: Var, layer: usize, graph: usize) -> Result<Var> {
        let l = &self.layers[layer];
        let z = g.concat(&[x_final, spatial, fused])?;
        let z = l.sf.forward(g, z)?;
        Ok(l.sf_heads[graph].forward(g, z)?)
    }

    /// `Mᵢ = FCᵢ(MFᵢ([S¹ ∥ … ∥ Sᴶ]))`.
    pub fn multi_fusion(&self, g: &mut Graph, s: &[Var], layer: usize) -> Result<Var> {
        if s.len() != self.cfg.graphs {
            return Err(Error::Validation(format!(
                "expected {} single-graph outputs, got {}",
                self.cfg.graphs,
                s.len()
            )));
        }
        if let Some(bad) = s.iter().find(|&&v| g.shape(v) != g.shape(s[0])) {
            return Err(Error::Validation(format!(
                "ragged single-graph outputs: {:?} vs {:?}",
                g.shape(*bad),
                g.shape(s[0])
            )));
        }
        let l = &self.layers[layer];
        let z = g.concat(s)?;
        let z = l.mf.forward(g, z)?;
        Ok(l.mf_out.forward(g, z)?)
    }

    /// `G' = S ⊙ sigmoid(FC(SelfAttn(G)))`, attention over each node's
    /// channel chunks only.
    pub fn feedback_update(&self, g: &mut Graph, s: Var, spatial: Var, layer: usize) -> Result<Var> {
        let gate = self.layers[layer]
            .gate
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("layer {layer} has no feedback gate")))?;
        apply_gate(g, gate, s, spatial)
    }

    /// Runs all layers and the output head, returning `M_L` and the
    /// `[B, N, T_out]` forecast.
    pub fn stfm_forward(&self, g: &mut Graph, x_final: Var, state: FusionState) -> Result<(Var, Var)> {
        let FusionState { mut spatial, mut fused, .. } = state;
        for i in 0..self.cfg.layers {
            let mut s = Vec::with_capacity(spatial.len());
            for (j, &gj) in spatial.iter().enumerate() {
                let sij = self
                    .single_fusion(g, x_final, gj, fused, i, j)
                    .map_err(activation_error(i + 1, j + 1))?;
                s.push(sij);
            }
            fused = self.multi_fusion(g, &s, i).map_err(activation_error(i + 1, 0))?;
            if self.layers[i].gate.is_some() {
                for j in 0..spatial.len() {
                    spatial[j] = self
                        .feedback_update(g, s[j], spatial[j], i)
                        .map_err(activation_error(i + 1, j + 1))?;
                }
            }
        }
        let head_in = if self.cfg.head_skip {
            g.concat(&[fused, x_final])?
        } else {
            fused
        };
        let y = self.head.forward(g, head_in).map_err(|e| activation_error(self.cfg.layers, 0)(e.into()))?;
        Ok((fused, y))
    }
}

pub(crate) fn apply_gate(g: &mut Graph, gate: &FeedbackGate, s: Var, spatial: Var) -> Result<Var> {
    let shape = g.shape(spatial).to_vec();
    let d = *shape.last().unwrap_or(&0);
    if g.shape(s) != shape.as_slice() || d % gate.tokens != 0 {
        return Err(Error::Validation(format!(
            "gate inputs {:?} and {:?} disagree",
            g.shape(s),
            shape
        )));
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let tokens = g.reshape(spatial, &[rows, gate.tokens, d / gate.tokens])?;
    let a = gate.attn.forward(g, tokens, tokens)?;
    let a = g.reshape(a, &shape)?;
    let a = gate.fc.forward(g, a)?;
    let a = g.sigmoid(a)?;
    Ok(g.mul(s, a)?)
}
