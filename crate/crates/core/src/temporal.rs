//! Multi-scale temporal pathway: patched long-window projection, a short
//! window attention encoder, a decoder that cross-attends to it, and a
//! channel-wise readout to one vector per node.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use stb_tensor::{Graph, LayerNorm, Linear, MultiHeadAttention, ParamId, ParamStore, Rmlp, Tensor, Var};

use crate::batch::Batch;
use crate::data::csv_err;
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemporalConfig {
    pub t_short: usize,
    pub t_long: usize,
    pub t_out: usize,
    pub patch_len: usize,
    pub d_p: usize,
    pub d_x: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Include the long-window branch.
    pub use_long: bool,
    /// Add time-of-day / weekday embeddings when timestamps exist.
    pub calendar: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        TemporalConfig {
            t_short: 12,
            t_long: 288,
            t_out: 12,
            patch_len: 12,
            d_p: 8,
            d_x: 16,
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            use_long: true,
            calendar: true,
        }
    }
}

impl TemporalConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.temporal.t_short", self.t_short),
            ("model.temporal.t_long", self.t_long),
            ("model.temporal.t_out", self.t_out),
            ("model.temporal.patch_len", self.patch_len),
            ("model.temporal.d_p", self.d_p),
            ("model.temporal.d_x", self.d_x),
            ("model.temporal.d_model", self.d_model),
            ("model.temporal.heads", self.heads),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.t_short > self.t_long {
            return Err(Error::config(
                "model.temporal.t_short",
                format!("{} exceeds t_long {}", self.t_short, self.t_long),
            ));
        }
        if self.use_long && self.t_long % self.patch_len != 0 {
            return Err(Error::config(
                "model.temporal.patch_len",
                format!("t_long {} is not divisible by patch_len {}", self.t_long, self.patch_len),
            ));
        }
        if self.d_x % self.heads != 0 {
            return Err(Error::config(
                "model.temporal.heads",
                format!("d_x {} is not divisible by {} heads", self.d_x, self.heads),
            ));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        self.t_long / self.patch_len
    }

    /// Channels per time step entering the readout.
    pub fn concat_width(&self) -> usize {
        2 * self.d_x + if self.use_long { self.d_p } else { 0 }
    }
}

/// Non-overlapping patches `[.., T_long/p, p·F]` mapped to `d_p` channels,
/// then a learned map along the patch axis down to `T_short` steps.
#[derive(Debug, Clone)]
pub struct LongProjection {
    pub patch: Linear,
    pub align: Linear,
    pub patch_len: usize,
    pub n_features: usize,
}

impl LongProjection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &TemporalConfig,
        n_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.t_long % cfg.patch_len != 0 {
            return Err(Error::config("model.temporal.patch_len", "t_long must be divisible by patch_len"));
        }
        Ok(LongProjection {
            patch: Linear::new(store, &format!("{name}.patch"), cfg.patch_len * n_features, cfg.d_p, rng)?,
            align: Linear::new(store, &format!("{name}.align"), cfg.n_patches(), cfg.t_short, rng)?,
            patch_len: cfg.patch_len,
            n_features,
        })
    }

    pub fn num_params(&self) -> usize {
        self.patch.num_params() + self.align.num_params()
    }

    /// `[R, T_long, F] -> [R, T_long/p, d_p]`.
    pub fn patches(&self, g: &mut Graph, x_long: Var) -> Result<Var> {
        let s = g.shape(x_long).to_vec();
        if s.len() != 3 || s[2] != self.n_features || s[1] % self.patch_len != 0 {
            return Err(Error::config(
                "model.temporal.patch_len",
                format!("long input {s:?} does not split into patches of {}", self.patch_len),
            ));
        }
        let x = g.reshape(x_long, &[s[0], s[1] / self.patch_len, self.patch_len * s[2]])?;
        Ok(self.patch.forward(g, x)?)
    }

    /// `[R, T_long, F] -> [R, T_short, d_p]`.
    pub fn forward(&self, g: &mut Graph, x_long: Var) -> Result<Var> {
        let p = self.patches(g, x_long)?;
        let p = g.permute(p, &[0, 2, 1])?;
        let a = self.align.forward(g, p)?;
        Ok(g.permute(a, &[0, 2, 1])?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub rmlp: Rmlp,
    pub ln2: LayerNorm,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(EncoderLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, LN_EPS)?,
            rmlp: Rmlp::new(store, &format!("{name}.rmlp"), d, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, LN_EPS)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, u: Var) -> Result<Var> {
        let a = self.attn.forward(g, u, u)?;
        let u = g.add(u, a)?;
        let u = self.ln1.forward(g, u)?;
        let r = self.rmlp.forward(g, u)?;
        let u = g.add(u, r)?;
        Ok(self.ln2.forward(g, u)?)
    }
}

/// Self-attention layers shared by every node.
#[derive(Debug, Clone)]
pub struct ShortEncoder {
    pub layers: Vec<EncoderLayer>,
}

impl ShortEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &TemporalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.{i}"), cfg.d_x, cfg.heads, rng))
            .collect::<Result<_>>()?;
        Ok(ShortEncoder { layers })
    }

    /// `[R, T_short, d_x]` in and out; zero layers is the identity.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |u, l| l.forward(g, u))
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub rmlp: Rmlp,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), d, heads, rng)?,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d, LN_EPS)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), d, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d, LN_EPS)?,
            rmlp: Rmlp::new(store, &format!("{name}.rmlp"), d, rng)?,
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d, LN_EPS)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, v: Var, enc: Var) -> Result<Var> {
        let a = self.self_attn.forward(g, v, v)?;
        let v = g.add(v, a)?;
        let v = self.ln1.forward(g, v)?;
        let c = self.cross_attn.forward(g, v, enc)?;
        let v = g.add(v, c)?;
        let v = self.ln2.forward(g, v)?;
        let r = self.rmlp.forward(g, v)?;
        let v = g.add(v, r)?;
        Ok(self.ln3.forward(g, v)?)
    }
}

#[derive(Debug, Clone)]
pub struct ShortDecoder {
    pub layers: Vec<DecoderLayer>,
}

impl ShortDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &TemporalConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::new(store, &format!("{name}.{i}"), cfg.d_x, cfg.heads, rng))
            .collect::<Result<_>>()?;
        Ok(ShortDecoder { layers })
    }

    /// Starts from the short input itself and refines it against `enc`.
    pub fn forward(&self, g: &mut Graph, x: Var, enc: Var) -> Result<Var> {
        let (xs, es) = (g.shape(x).to_vec(), g.shape(enc).to_vec());
        if xs.len() < 2 || es.len() != xs.len() || xs[..xs.len() - 1] != es[..es.len() - 1] {
            return Err(Error::Validation(format!(
                "decoder input {xs:?} and encoder output {es:?} disagree on rows or time steps"
            )));
        }
        self.layers.iter().try_fold(x, |v, l| l.forward(g, v, enc))
    }
}

/// Concatenates the branches along channels, flattens time and reads out
/// `d_model` features: `[R, T_short, ·]... -> [R, d_model]`.
pub fn fuse_temporal(g: &mut Graph, long: Option<Var>, enc: Var, dec: Var, readout: &Linear) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    parts.extend(long);
    parts.push(enc);
    parts.push(dec);
    let t = g.shape(enc)[1];
    for &p in &parts {
        let s = g.shape(p);
        if s.len() != 3 || s[1] != t || s[0] != g.shape(enc)[0] {
            return Err(Error::Validation(format!(
                "temporal branches have mismatched time lengths: {:?} vs {:?}",
                g.shape(p),
                g.shape(enc)
            )));
        }
    }
    let z = g.concat(&parts)?;
    let s = g.shape(z).to_vec();
    let z = g.reshape(z, &[s[0], s[1] * s[2]])?;
    Ok(readout.forward(g, z)?)
}

/// The whole temporal pathway, producing one `d_model` vector per node.
#[derive(Debug, Clone)]
pub struct TemporalEnhancer {
    pub cfg: TemporalConfig,
    pub n_features: usize,
    pub lift: Linear,
    pub position: ParamId,
    pub time_of_day: Option<ParamId>,
    pub weekday: Option<ParamId>,
    pub long: Option<LongProjection>,
    pub encoder: ShortEncoder,
    pub decoder: ShortDecoder,
    pub readout: Linear,
}

impl TemporalEnhancer {
    /// `steps_per_day` enables the calendar embeddings when
    /// `cfg.calendar` is set.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        cfg: &TemporalConfig,
        n_features: usize,
        steps_per_day: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let lift = Linear::new(store, "temporal.lift", n_features, cfg.d_x, rng)?;
        let position = store.add_uniform("temporal.position", &[cfg.t_short, cfg.d_x], cfg.d_x, rng)?;
        let (time_of_day, weekday) = match (cfg.calendar, steps_per_day) {
            // Zero rows: a slot never seen in training adds nothing.
            (true, Some(spd)) => (
                Some(store.add("temporal.time_of_day", Tensor::zeros(&[spd, cfg.d_x]))?),
                Some(store.add("temporal.weekday", Tensor::zeros(&[7, cfg.d_x]))?),
            ),
            _ => (None, None),
        };
        let long = if cfg.use_long {
            Some(LongProjection::new(store, "temporal.long", cfg, n_features, rng)?)
        } else {
            None
        };
        let encoder = ShortEncoder::new(store, "temporal.enc", cfg, rng)?;
        let decoder = ShortDecoder::new(store, "temporal.dec", cfg, rng)?;
        let readout = Linear::new(store, "temporal.readout", cfg.t_short * cfg.concat_width(), cfg.d_model, rng)?;
        Ok(TemporalEnhancer {
            cfg: cfg.clone(),
            n_features,
            lift,
            position,
            time_of_day,
            weekday,
            long,
            encoder,
            decoder,
            readout,
        })
    }

    /// Parameter count implied by the configuration alone.
    pub fn expected_params(cfg: &TemporalConfig, n_features: usize, steps_per_day: Option<usize>) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let (d, ts) = (cfg.d_x, cfg.t_short);
        let mha = 4 * lin(d, d);
        let rmlp = 2 * lin(d, d);
        let ln = 2 * d;
        let mut total = lin(n_features, d) + ts * d;
        if let (true, Some(spd)) = (cfg.calendar, steps_per_day) {
            total += spd * d + 7 * d;
        }
        if cfg.use_long {
            total += lin(cfg.patch_len * n_features, cfg.d_p) + lin(cfg.n_patches(), ts);
        }
        total += cfg.enc_layers * (mha + rmlp + 2 * ln);
        total += cfg.dec_layers * (2 * mha + rmlp + 3 * ln);
        total + lin(ts * cfg.concat_width(), cfg.d_model)
    }

    /// Lifted short input with position (and calendar) embeddings, `[R, T_short, d_x]`.
    fn short_input(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let s = batch.x_short.shape();
        let (b, n, ts, f) = (s[0], s[1], s[2], s[3]);
        if ts != self.cfg.t_short || f != self.n_features {
            return Err(Error::Validation(format!(
                "short window {s:?} does not match t_short {} and {} features",
                self.cfg.t_short, self.n_features
            )));
        }
        let x = g.constant(batch.x_short.reshape(&[b * n, ts, f])?);
        let x = self.lift.forward(g, x)?;
        let pos = g.param(self.position);
        let mut x = g.add(x, pos)?;
        if let (Some(tod), Some(dow)) = (self.time_of_day, self.weekday) {
            let cal = batch.calendar.as_ref().ok_or_else(|| {
                Error::Validation("calendar embeddings need timestamped windows".into())
            })?;
            let mut tod_idx = Vec::with_capacity(b * n * ts);
            let mut dow_idx = Vec::with_capacity(b * n * ts);
            for bi in 0..b {
                for _ in 0..n {
                    for t in 0..ts {
                        let (a, w) = cal[bi * ts + t];
                        tod_idx.push(a);
                        dow_idx.push(w);
                    }
                }
            }
            for (table, idx) in [(tod, tod_idx), (dow, dow_idx)] {
                let table = g.param(table);
                let e = g.gather(table, &idx)?;
                let e = g.reshape(e, &[b * n, ts, self.cfg.d_x])?;
                x = g.add(x, e)?;
            }
        }
        Ok(x)
    }

    /// `X_final` of shape `[B, N, d_model]`.
    pub fn forward(&self, g: &mut Graph, batch: &Batch) -> Result<Var> {
        let (b, n) = (batch.len(), batch.n_nodes());
        let x = self.short_input(g, batch)?;
        let enc = self.encoder.forward(g, x)?;
        let dec = self.decoder.forward(g, x, enc)?;
        let long = match &self.long {
            Some(lp) => {
                let s = batch.x_long.shape();
                if s[2] != self.cfg.t_long {
                    return Err(Error::Validation(format!(
                        "long window has {} steps, expected {}",
                        s[2], self.cfg.t_long
                    )));
                }
                let xl = g.constant(batch.x_long.reshape(&[b * n, s[2], s[3]])?);
                Some(lp.forward(g, xl)?)
            }
            None => None,
        };
        let out = fuse_temporal(g, long, enc, dec, &self.readout)?;
        Ok(g.reshape(out, &[b, n, self.cfg.d_model])?)
    }
}

/// Mean absolute error per node and horizon, averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonErrors {
    pub n_nodes: usize,
    pub t_out: usize,
    /// `[node * t_out + horizon]`
    pub table: Vec<f64>,
}

impl HorizonErrors {
    pub fn get(&self, node: usize, horizon: usize) -> f64 {
        self.table[node * self.t_out + horizon]
    }

    /// Mean over nodes for each horizon.
    pub fn per_horizon(&self) -> Vec<f64> {
        (0..self.t_out)
            .map(|h| (0..self.n_nodes).map(|n| self.get(n, h)).sum::<f64>() / self.n_nodes as f64)
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["node", "horizon", "abs_error"]).map_err(|e| csv_err(path, e))?;
        for n in 0..self.n_nodes {
            for h in 0..self.t_out {
                w.write_record([n.to_string(), (h + 1).to_string(), format!("{:.9}", self.get(n, h))])
                    .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `predictions` and `targets` are `[.., N, T_out]` with identical shapes.
pub fn horizon_error_report(predictions: &Tensor, targets: &Tensor) -> Result<HorizonErrors> {
    if predictions.shape() != targets.shape() || predictions.rank() < 2 {
        return Err(Error::Validation(format!(
            "prediction shape {:?} does not match target shape {:?}",
            predictions.shape(),
            targets.shape()
        )));
    }
    let r = predictions.rank();
    let (n, t) = (predictions.shape()[r - 2], predictions.shape()[r - 1]);
    let samples = predictions.len() / (n * t);
    let mut table = vec![0.0; n * t];
    for (i, (p, y)) in predictions.data().iter().zip(targets.data()).enumerate() {
        table[i % (n * t)] += (p - y).abs();
    }
    table.iter_mut().for_each(|v| *v /= samples as f64);
    Ok(HorizonErrors { n_nodes: n, t_out: t, table })
}
