//! Datasets, the training loop and evaluation against naive baselines.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use stb_tensor::{clip_global_norm, Adam, Graph, ParamStore, Tensor};

use crate::batch::Batch;
use crate::data::{csv_err, window_sampler, Normalizer, SeriesTensor, SplitRanges, SplitSpec, WindowShape, Windows};
use crate::error::{Error, Result};
use crate::graph::{negative_sample, ReconstructionTerms, SparseGraph};
use crate::metrics::{write_metrics_csv, MetricSuite};
use crate::model::{DataDims, ModelConfig, StBalance};
use crate::temporal::{horizon_error_report, HorizonErrors};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A normalised series with its prior graphs and chronological splits.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub raw: SeriesTensor,
    pub series: SeriesTensor,
    pub normalizer: Normalizer,
    pub graphs: Vec<SparseGraph>,
    pub splits: SplitRanges,
    pub target_feature: usize,
}

impl Dataset {
    pub fn new(
        raw: SeriesTensor,
        graphs: Vec<SparseGraph>,
        split: &SplitSpec,
        per_node: bool,
        target_feature: usize,
    ) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::config("data.graphs", "at least one prior graph is required"));
        }
        if let Some(g) = graphs.iter().find(|g| g.n_nodes() != raw.n_nodes()) {
            return Err(Error::Validation(format!(
                "graph has {} nodes but the series has {}",
                g.n_nodes(),
                raw.n_nodes()
            )));
        }
        if target_feature >= raw.n_features() {
            return Err(Error::config("data.target_feature", "index out of range"));
        }
        let splits = split.ranges(raw.n_steps())?;
        let normalizer = Normalizer::fit(&raw, splits.train.clone(), per_node)?;
        let series = normalizer.normalize(&raw)?;
        Ok(Dataset {
            raw,
            series,
            normalizer,
            graphs,
            splits,
            target_feature,
        })
    }

    pub fn dims(&self, calendar: bool) -> DataDims {
        DataDims {
            n_nodes: self.raw.n_nodes(),
            n_features: self.raw.n_features(),
            steps_per_day: if calendar { self.raw.steps_per_day() } else { None },
        }
    }

    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        match split {
            Split::Train => self.splits.train.clone(),
            Split::Val => self.splits.val.clone(),
            Split::Test => self.splits.test.clone(),
        }
    }

    /// Windows of `split` whose anchor is at least `min_end`.
    pub fn windows(&self, shape: WindowShape, split: Split, min_end: usize) -> Result<Windows<'_>> {
        let w = window_sampler(&self.series, shape, false)?
            .restrict_targets(self.range(split))
            .min_end(min_end);
        if w.is_empty() {
            return Err(Error::Validation(format!(
                "{split:?} split yields no windows for t_long {} and t_out {}",
                shape.t_long, shape.t_out
            )));
        }
        Ok(w)
    }

    /// Per-node training mean of the target on the raw scale.
    pub fn climatology(&self) -> Vec<f64> {
        let r = self.splits.train.clone();
        (0..self.raw.n_nodes())
            .map(|n| r.clone().map(|t| self.raw.at(n, t, self.target_feature)).sum::<f64>() / r.len() as f64)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Multiplicative learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Spacing between training windows.
    pub stride: usize,
    /// Spacing between validation/test windows.
    pub eval_stride: usize,
    /// Samples per gradient work unit; fixed so results do not depend on
    /// the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            lr_decay: 0.97,
            epochs: 30,
            batch_size: 16,
            seed: 7,
            clip_norm: 5.0,
            patience: 10,
            stride: 1,
            eval_stride: 1,
            chunk_size: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a finite non-negative number"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("train.lr_decay", "must lie in (0, 1]"));
        }
        for (k, v) in [
            ("train.epochs", self.epochs),
            ("train.batch_size", self.batch_size),
            ("train.stride", self.stride),
            ("train.eval_stride", self.eval_stride),
            ("train.chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be at least 1"));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StBalance,
    /// Parameters of the epoch with the best validation MAE.
    pub store: ParamStore,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

/// Shape of the windows a model configuration consumes.
pub fn window_shape(cfg: &ModelConfig, stride: usize, target_feature: usize) -> WindowShape {
    WindowShape {
        t_short: cfg.temporal.t_short,
        t_long: cfg.temporal.t_long.max(cfg.temporal.t_short),
        t_out: cfg.temporal.t_out,
        stride,
        target_feature,
    }
}

/// Trains from a fresh initialisation. `min_end` aligns the first usable
/// window across runs with different long windows.
pub fn train(cfg: &ModelConfig, data: &Dataset, tc: &TrainConfig, min_end: usize) -> Result<TrainOutcome> {
    tc.validate()?;
    let mut store = ParamStore::new();
    let dims = data.dims(cfg.temporal.calendar);
    let model = StBalance::new(&mut store, cfg, dims, &data.graphs, tc.seed)?;
    let train_w = data.windows(window_shape(cfg, tc.stride, data.target_feature), Split::Train, min_end)?;
    let val_w = data.windows(window_shape(cfg, tc.eval_stride, data.target_feature), Split::Val, min_end)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_ba7c);
    let mut adam = Adam::new(store.num_scalars(), tc.lr);
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let rec_graph = &data.graphs[0];
    let n_neg = (cfg.embedding.negatives_per_edge * rec_graph.n_edges())
        .min(rec_graph.n_nodes() * (rec_graph.n_nodes() - 1) / 2 - rec_graph.n_edges());

    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, 0usize, store.clone());
    let mut stale = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let terms = if cfg.embedding.refine && cfg.embedding.lambda > 0.0 {
            let negatives = negative_sample(rec_graph, n_neg, rand::Rng::random(&mut rng))?;
            Some(ReconstructionTerms::new(rec_graph, &negatives, cfg.embedding.beta)?)
        } else {
            None
        };
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, idx) in order.chunks(tc.batch_size).enumerate() {
            let pairs: Vec<_> = idx.iter().map(|&i| train_w.get(i)).collect();
            let (loss, mut grads) = batch_gradient(&model, &store, &pairs, terms.as_ref(), tc.chunk_size)
                .map_err(|e| Error::Training { epoch, batch: bi, msg: e.to_string() })?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    batch: bi,
                    msg: format!("non-finite loss {loss}"),
                });
            }
            clip_global_norm(&mut grads, tc.clip_norm);
            let mut flat = store.flatten();
            adam.step(&mut flat, &grads);
            store.assign_flat(&flat)?;
            total += loss;
            batches += 1;
        }
        let val_mae = predict_windows(&model, &store, &val_w, data)?.mae();
        log::info!(
            "epoch {epoch}: train loss {:.5}, val mae {:.5}, lr {:.2e}",
            total / batches as f64,
            val_mae,
            adam.lr
        );
        trace.push(EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            val_mae,
            lr: adam.lr,
        });
        if val_mae < best.0 {
            best = (val_mae, epoch, store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
        adam.lr *= tc.lr_decay;
    }
    Ok(TrainOutcome {
        model,
        store: best.2,
        trace,
        best_epoch: best.1,
        best_val_mae: best.0,
    })
}

/// Loss and flat gradient of one mini-batch. Work is split into fixed
/// chunks evaluated in parallel and summed in chunk order.
pub fn batch_gradient(
    model: &StBalance,
    store: &ParamStore,
    pairs: &[crate::data::WindowPair],
    terms: Option<&ReconstructionTerms>,
    chunk_size: usize,
) -> Result<(f64, Vec<f64>)> {
    let cells: usize = pairs.iter().map(|p| p.target.len()).sum();
    let denom = cells as f64;
    let chunks: Vec<&[crate::data::WindowPair]> = pairs.chunks(chunk_size).collect();
    let n_jobs = chunks.len() + usize::from(terms.is_some() && model.cfg.embedding.refine);
    let parts: Vec<Result<(f64, Vec<f64>)>> = (0..n_jobs)
        .into_par_iter()
        .map(|j| {
            let mut g = Graph::with_params(store);
            let loss = if j < chunks.len() {
                let batch = Batch::from_pairs(chunks[j])?;
                model.forecast_loss(&mut g, &batch, denom)?
            } else {
                model.reconstruction_loss(&mut g, terms.expect("job exists only with terms"))?
            };
            let grads = g.backward(loss)?;
            Ok((g.value(loss).item(), grads.flat(store)))
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; store.num_scalars()];
    for p in parts {
        let (l, g) = p?;
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    Ok((total, grad))
}

/// Denormalised forecasts and raw targets for a window set, `[S, N, T_out]`.
#[derive(Debug, Clone)]
pub struct Predictions {
    pub predictions: Tensor,
    pub targets: Tensor,
    /// Last observed raw target value per sample and node, `[S, N]`.
    pub last_observed: Tensor,
    pub ends: Vec<usize>,
}

impl Predictions {
    pub fn mae(&self) -> f64 {
        crate::metrics::mae(self.targets.data(), self.predictions.data()).unwrap_or(f64::NAN)
    }
}

const EVAL_CHUNK: usize = 32;

pub fn predict_windows(model: &StBalance, store: &ParamStore, windows: &Windows<'_>, data: &Dataset) -> Result<Predictions> {
    let n = data.raw.n_nodes();
    let t_out = windows.shape().t_out;
    let f = data.target_feature;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let parts: Vec<Result<Tensor>> = idx
        .par_chunks(EVAL_CHUNK)
        .map(|c| {
            let pairs: Vec<_> = c.iter().map(|&i| windows.get(i)).collect();
            model.predict(store, &Batch::from_pairs(&pairs)?)
        })
        .collect();
    let mut pred = Vec::with_capacity(windows.len() * n * t_out);
    for p in parts {
        pred.extend_from_slice(p?.data());
    }
    let s = windows.len();
    for (i, v) in pred.iter_mut().enumerate() {
        let node = (i / t_out) % n;
        *v = data.normalizer.denormalize_value(node, f, *v);
    }
    let mut targets = Vec::with_capacity(pred.len());
    let mut last = Vec::with_capacity(s * n);
    for &e in windows.ends() {
        for node in 0..n {
            for h in 0..t_out {
                targets.push(data.raw.at(node, e + h, f));
            }
            last.push(data.raw.at(node, e - 1, f));
        }
    }
    Ok(Predictions {
        predictions: Tensor::new(vec![s, n, t_out], pred)?,
        targets: Tensor::new(vec![s, n, t_out], targets)?,
        last_observed: Tensor::new(vec![s, n], last)?,
        ends: windows.ends().to_vec(),
    })
}

#[derive(Debug, Clone)]
pub struct ForecastReport {
    pub overall: MetricSuite,
    pub per_horizon: Vec<MetricSuite>,
    pub horizon_errors: HorizonErrors,
    /// Copy-last-observation baseline.
    pub hl: MetricSuite,
    /// Per-node training-mean baseline.
    pub climatology: MetricSuite,
    pub n_samples: usize,
}

/// Reorders `[S, N, T]` data into node-major `[N, S·T]`, optionally for one
/// horizon only.
fn node_major(x: &Tensor, horizon: Option<usize>) -> Vec<f64> {
    let s = x.shape();
    let (ns, n, t) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(x.len());
    for node in 0..n {
        for si in 0..ns {
            match horizon {
                Some(h) => out.push(x.data()[(si * n + node) * t + h]),
                None => out.extend_from_slice(&x.data()[(si * n + node) * t..(si * n + node + 1) * t]),
            }
        }
    }
    out
}

pub fn score(p: &Predictions, data: &Dataset, pnse_threshold: f64) -> Result<ForecastReport> {
    let s = p.targets.shape().to_vec();
    let (ns, n, t) = (s[0], s[1], s[2]);
    let y = node_major(&p.targets, None);
    let overall = MetricSuite::compute(&y, &node_major(&p.predictions, None), ns * t, pnse_threshold)?;
    let per_horizon = (0..t)
        .map(|h| {
            MetricSuite::compute(
                &node_major(&p.targets, Some(h)),
                &node_major(&p.predictions, Some(h)),
                ns,
                pnse_threshold,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let hl: Vec<f64> = (0..n)
        .flat_map(|node| (0..ns).flat_map(move |si| std::iter::repeat_n((si, node), t)))
        .map(|(si, node)| p.last_observed.data()[si * n + node])
        .collect();
    let clim_node = data.climatology();
    let clim: Vec<f64> = (0..n).flat_map(|node| std::iter::repeat_n(clim_node[node], ns * t)).collect();
    Ok(ForecastReport {
        overall,
        per_horizon,
        horizon_errors: horizon_error_report(&p.predictions, &p.targets)?,
        hl: MetricSuite::compute(&y, &hl, ns * t, pnse_threshold)?,
        climatology: MetricSuite::compute(&y, &clim, ns * t, pnse_threshold)?,
        n_samples: ns,
    })
}

/// Predicts on `split` and scores against the baselines.
pub fn evaluate(
    model: &StBalance,
    store: &ParamStore,
    data: &Dataset,
    split: Split,
    eval_stride: usize,
    min_end: usize,
) -> Result<ForecastReport> {
    let w = data.windows(window_shape(&model.cfg, eval_stride, data.target_feature), split, min_end)?;
    score(&predict_windows(model, store, &w, data)?, data, 0.0)
}

impl ForecastReport {
    /// `horizon,mae,...` with an `all` row followed by horizons `1..=T_out`.
    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut rows = vec![("all".to_string(), &self.overall)];
        rows.extend(self.per_horizon.iter().enumerate().map(|(h, m)| ((h + 1).to_string(), m)));
        write_metrics_csv(path, "horizon", &rows)
    }

    /// Overall scores of the model and both baselines, first column naming
    /// the method.
    pub fn write_baselines(&self, path: &Path) -> Result<()> {
        write_metrics_csv(
            path,
            "method",
            &[
                ("st_balance".to_string(), &self.overall),
                ("hl".to_string(), &self.hl),
                ("climatology".to_string(), &self.climatology),
            ],
        )
    }
}

pub fn write_trace(path: &Path, trace: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["epoch", "train_loss", "val_mae", "lr"]).map_err(|e| csv_err(path, e))?;
    for r in trace {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.9}", r.train_loss),
            format!("{:.9}", r.val_mae),
            format!("{:.6e}", r.lr),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
