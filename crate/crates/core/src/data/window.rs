use std::ops::Range;

use stb_tensor::Tensor;

use super::series::SeriesTensor;
use crate::error::{Error, Result};

/// One forecasting sample. Both input windows end at step `end` (exclusive);
/// the target covers `[end, end + T_out)` of the target feature.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub end: usize,
    /// `[N, T_short, F]`, the trailing suffix of `x_long`.
    pub x_short: Tensor,
    /// `[N, T_long, F]`.
    pub x_long: Tensor,
    /// `[N, T_out, 1]`.
    pub target: Tensor,
    /// Time-of-day slot and weekday of each short step, when timestamps exist.
    pub calendar: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowShape {
    pub t_short: usize,
    pub t_long: usize,
    pub t_out: usize,
    pub stride: usize,
    pub target_feature: usize,
}

impl WindowShape {
    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("t_short", self.t_short),
            ("t_long", self.t_long),
            ("t_out", self.t_out),
            ("stride", self.stride),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.t_short > self.t_long {
            return Err(Error::config(
                "t_short",
                format!("t_short {} exceeds t_long {}", self.t_short, self.t_long),
            ));
        }
        Ok(())
    }
}

/// Lazily materialised windows over a series; cheap to clone and share
/// between worker threads.
#[derive(Debug, Clone)]
pub struct Windows<'a> {
    series: &'a SeriesTensor,
    shape: WindowShape,
    ends: Vec<usize>,
}

impl<'a> Windows<'a> {
    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    pub fn shape(&self) -> WindowShape {
        self.shape
    }

    pub fn series(&self) -> &'a SeriesTensor {
        self.series
    }

    pub fn ends(&self) -> &[usize] {
        &self.ends
    }

    pub fn get(&self, i: usize) -> WindowPair {
        materialize(self.series, &self.shape, self.ends[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = WindowPair> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Windows whose whole target lies in `targets`; inputs may reach back
    /// before the range start.
    pub fn restrict_targets(mut self, targets: Range<usize>) -> Self {
        let t_out = self.shape.t_out;
        self.ends.retain(|&e| e >= targets.start && e + t_out <= targets.end);
        self
    }

    /// Keeps only windows ending at or after `min_end`, so differently sized
    /// long windows can be aligned on identical targets.
    pub fn min_end(mut self, min_end: usize) -> Self {
        self.ends.retain(|&e| e >= min_end);
        self
    }
}

pub fn materialize(series: &SeriesTensor, shape: &WindowShape, end: usize) -> WindowPair {
    let (n, nf) = (series.n_nodes(), series.n_features());
    let grab = |start: usize, len: usize, feats: Range<usize>| -> Tensor {
        let mut data = Vec::with_capacity(n * len * feats.len());
        for node in 0..n {
            for t in start..start + len {
                for f in feats.clone() {
                    data.push(series.at(node, t, f));
                }
            }
        }
        Tensor::new(vec![n, len, feats.len()], data).expect("window dims are positive")
    };
    let calendar = (0..shape.t_short)
        .map(|k| series.calendar(end - shape.t_short + k))
        .collect::<Option<Vec<_>>>();
    WindowPair {
        end,
        x_short: grab(end - shape.t_short, shape.t_short, 0..nf),
        x_long: grab(end - shape.t_long, shape.t_long, 0..nf),
        target: grab(end, shape.t_out, shape.target_feature..shape.target_feature + 1),
        calendar,
    }
}

/// Samples anchored every `stride` steps; the first window starts at 0.
///
/// Yields `floor((T - T_long - T_out) / stride) + 1` windows. A series
/// shorter than `T_long + T_out` is an error unless `allow_empty` is set.
pub fn window_sampler(
    x: &SeriesTensor,
    shape: WindowShape,
    allow_empty: bool,
) -> Result<Windows<'_>> {
    shape.validate()?;
    if shape.target_feature >= x.n_features() {
        return Err(Error::config(
            "target_feature",
            format!("index {} but series has {} features", shape.target_feature, x.n_features()),
        ));
    }
    let t = x.n_steps();
    let need = shape.t_long + shape.t_out;
    if t < need {
        if allow_empty {
            log::warn!("series of {t} steps yields no windows (needs {need})");
            return Ok(Windows { series: x, shape, ends: Vec::new() });
        }
        return Err(Error::Validation(format!(
            "series of {t} steps is shorter than t_long + t_out = {need}"
        )));
    }
    let ends = (shape.t_long..=t - shape.t_out).step_by(shape.stride).collect();
    Ok(Windows { series: x, shape, ends })
}
