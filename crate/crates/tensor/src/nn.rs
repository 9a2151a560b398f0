//! Parameterised layers built on [`Graph`] operations.

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Affine map over the trailing dimension, `y = x·w + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng)?;
        let b = store.add_uniform(format!("{name}.b"), &[d_out], d_in, rng)?;
        Ok(Linear { w, b, d_in, d_out })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w)?;
        g.add(xw, b)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }

    /// Overwrites the weights with `w` (`[d_in, d_out]`) and the bias with `b`.
    pub fn assign(&self, store: &mut ParamStore, w: Tensor, b: Tensor) -> Result<()> {
        store.set(self.w, w)?;
        store.set(self.b, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.w).data_mut().fill(0.0);
        store.get_mut(self.b).data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
        Ok(LayerNorm { gain, bias, eps })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }
}

/// Residual MLP block `Z -> FC2(relu(FC1(Z)) + Z)`. The residual joins
/// before the second projection, so both maps are square.
#[derive(Debug, Clone)]
pub struct Rmlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Rmlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Rmlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), d, d, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), d, d, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, z: Var) -> Result<Var> {
        let d = *g.shape(z).last().unwrap_or(&0);
        if d != self.fc1.d_in {
            return Err(TensorError::shape("rmlp_block", g.shape(z), &[self.fc1.d_in]));
        }
        let h = self.fc1.forward(g, z)?;
        let h = g.relu(h)?;
        let h = g.add(h, z)?;
        self.fc2.forward(g, h)
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

/// A stack of [`Rmlp`] blocks applied in sequence.
#[derive(Debug, Clone)]
pub struct RmlpStack {
    pub blocks: Vec<Rmlp>,
}

impl RmlpStack {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let blocks = (0..depth)
            .map(|i| Rmlp::new(store, &format!("{name}.{i}"), d, rng))
            .collect::<Result<_>>()?;
        Ok(RmlpStack { blocks })
    }

    pub fn forward(&self, g: &mut Graph, mut z: Var) -> Result<Var> {
        for b in &self.blocks {
            z = b.forward(g, z)?;
        }
        Ok(z)
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(Rmlp::num_params).sum()
    }
}

/// Scaled dot-product attention with `heads` heads over `[B, T, d]` inputs.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub d: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, rng)?,
            o: Linear::new(store, &format!("{name}.o"), d, d, rng)?,
            heads,
            d,
        })
    }

    pub fn num_params(&self) -> usize {
        4 * self.q.num_params()
    }

    pub fn forward(&self, g: &mut Graph, query: Var, context: Var) -> Result<Var> {
        self.forward_with_weights(g, query, context).map(|(out, _)| out)
    }

    /// Output and the `[B * heads, T_q, T_k]` attention weights.
    pub fn forward_with_weights(&self, g: &mut Graph, query: Var, context: Var) -> Result<(Var, Var)> {
        let qs = g.shape(query).to_vec();
        let ks = g.shape(context).to_vec();
        let squeeze = qs.len() == 2;
        let (query, context) = if squeeze {
            if ks.len() != 2 {
                return Err(TensorError::shape("multi_head_attention", &qs, &ks));
            }
            (
                g.reshape(query, &[1, qs[0], qs[1]])?,
                g.reshape(context, &[1, ks[0], ks[1]])?,
            )
        } else {
            (query, context)
        };
        let qs = g.shape(query).to_vec();
        let ks = g.shape(context).to_vec();
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != self.d || ks[2] != self.d {
            return Err(TensorError::shape("multi_head_attention", &qs, &ks));
        }
        let (b, tq, tk) = (qs[0], qs[1], ks[1]);
        let h = self.heads;
        let dh = self.d / h;

        let q = self.q.forward(g, query)?;
        let k = self.k.forward(g, context)?;
        let v = self.v.forward(g, context)?;
        let q = self.split_heads(g, q, b, tq)?;
        let k = self.split_heads(g, k, b, tk)?;
        let v = self.split_heads(g, v, b, tk)?;

        let scores = g.batch_matmul(q, k, true)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let weights = g.softmax(scores)?;
        let ctx = g.batch_matmul(weights, v, false)?;
        let ctx = self.merge_heads(g, ctx, b, tq)?;
        let mut out = self.o.forward(g, ctx)?;
        if squeeze {
            out = g.reshape(out, &[tq, self.d])?;
        }
        Ok((out, weights))
    }

    fn split_heads(&self, g: &mut Graph, x: Var, b: usize, t: usize) -> Result<Var> {
        let h = self.heads;
        let dh = self.d / h;
        if h == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, t, h, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b * h, t, dh])
    }

    fn merge_heads(&self, g: &mut Graph, x: Var, b: usize, t: usize) -> Result<Var> {
        let h = self.heads;
        let dh = self.d / h;
        if h == 1 {
            return Ok(x);
        }
        let x = g.reshape(x, &[b, h, t, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        g.reshape(x, &[b, t, self.d])
    }
}
