use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::series::SeriesTensor;
use crate::error::{Error, Result};

/// Chronological train/val/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [("data.split.train", self.train), ("data.split.val", self.val), ("data.split.test", self.test)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(k, format!("fraction must be positive, got {v}")));
            }
        }
        let sum = self.train + self.val + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("data.split", format!("fractions sum to {sum}, expected 1")));
        }
        Ok(())
    }

    /// Time-step ranges of each split for a series of `t` steps.
    pub fn ranges(&self, t: usize) -> Result<SplitRanges> {
        self.validate()?;
        let train_end = (t as f64 * self.train).round() as usize;
        let val_end = (t as f64 * (self.train + self.val)).round() as usize;
        if train_end == 0 || val_end <= train_end || val_end >= t {
            return Err(Error::Validation(format!(
                "series of {t} steps is too short for split {}/{}/{}",
                self.train, self.val, self.test
            )));
        }
        Ok(SplitRanges {
            train: 0..train_end,
            val: train_end..val_end,
            test: val_end..t,
        })
    }
}

/// Z-score statistics estimated on the training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub per_node: bool,
    pub n_features: usize,
    /// One entry per slice: `node * F + f` when per-node, otherwise `f`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Slices whose training variance was zero; their std is pinned to 1.
    pub flagged: Vec<usize>,
}

impl Normalizer {
    pub fn fit(x: &SeriesTensor, train: Range<usize>, per_node: bool) -> Result<Self> {
        if train.is_empty() || train.end > x.n_steps() {
            return Err(Error::Validation(format!(
                "training range {train:?} is empty or exceeds {} steps",
                x.n_steps()
            )));
        }
        let (n, nf) = (x.n_nodes(), x.n_features());
        let slices = if per_node { n * nf } else { nf };
        let mut sum = vec![0.0; slices];
        let mut count = vec![0usize; slices];
        for node in 0..n {
            for t in train.clone() {
                for f in 0..nf {
                    let s = if per_node { node * nf + f } else { f };
                    sum[s] += x.at(node, t, f);
                    count[s] += 1;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
        let mut sq = vec![0.0; slices];
        for node in 0..n {
            for t in train.clone() {
                for f in 0..nf {
                    let s = if per_node { node * nf + f } else { f };
                    let d = x.at(node, t, f) - mean[s];
                    sq[s] += d * d;
                }
            }
        }
        let mut flagged = Vec::new();
        let std = sq
            .iter()
            .zip(&count)
            .enumerate()
            .map(|(s, (q, &c))| {
                let sd = (q / c as f64).sqrt();
                if sd > 1e-12 * (1.0 + mean[s].abs()) {
                    sd
                } else {
                    flagged.push(s);
                    1.0
                }
            })
            .collect();
        if !flagged.is_empty() {
            log::warn!("{} zero-variance slice(s) left unscaled", flagged.len());
        }
        Ok(Normalizer {
            per_node,
            n_features: nf,
            mean,
            std,
            flagged,
        })
    }

    fn slice(&self, node: usize, f: usize) -> usize {
        if self.per_node {
            node * self.n_features + f
        } else {
            f
        }
    }

    pub fn normalize_value(&self, node: usize, f: usize, v: f64) -> f64 {
        let s = self.slice(node, f);
        (v - self.mean[s]) / self.std[s]
    }

    pub fn denormalize_value(&self, node: usize, f: usize, v: f64) -> f64 {
        let s = self.slice(node, f);
        v * self.std[s] + self.mean[s]
    }

    fn check(&self, x: &SeriesTensor) -> Result<()> {
        let slices = if self.per_node { x.n_nodes() * x.n_features() } else { x.n_features() };
        if x.n_features() != self.n_features || slices != self.mean.len() {
            return Err(Error::Validation(format!(
                "normalizer fitted on {} slices cannot apply to series {:?}",
                self.mean.len(),
                x.values().shape()
            )));
        }
        Ok(())
    }

    fn apply(&self, x: &SeriesTensor, f: impl Fn(&Self, usize, usize, f64) -> f64) -> Result<SeriesTensor> {
        self.check(x)?;
        let mut out = x.clone();
        let (tn, nf) = (x.n_steps(), x.n_features());
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let node = i / (tn * nf);
            let feat = i % nf;
            *v = f(self, node, feat, *v);
        }
        Ok(out)
    }

    pub fn normalize(&self, x: &SeriesTensor) -> Result<SeriesTensor> {
        self.apply(x, Self::normalize_value)
    }

    pub fn denormalize(&self, x: &SeriesTensor) -> Result<SeriesTensor> {
        self.apply(x, Self::denormalize_value)
    }
}

/// Fits a [`Normalizer`] on the training split and applies it to all of `x`.
pub fn zscore(x: &SeriesTensor, split: &SplitSpec, per_node: bool) -> Result<(SeriesTensor, Normalizer)> {
    let ranges = split.ranges(x.n_steps())?;
    let norm = Normalizer::fit(x, ranges.train, per_node)?;
    Ok((norm.normalize(x)?, norm))
}
