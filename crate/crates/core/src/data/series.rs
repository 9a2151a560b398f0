use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use stb_tensor::Tensor;

use super::container::{Container, DType};
use crate::error::{Error, Result};

/// Node-major multivariate series `[N, T, F]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesTensor {
    values: Tensor,
    pub start_timestamp: Option<i64>,
    pub step_seconds: Option<i64>,
    pub feature_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesFormat {
    Container,
    LongCsv,
}

impl SeriesFormat {
    /// Guesses the format from the file extension (`.csv` is long CSV).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => SeriesFormat::LongCsv,
            _ => SeriesFormat::Container,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Fill missing cells and gaps with the previous observation instead of
    /// failing.
    pub forward_fill: bool,
}

impl SeriesTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::Validation(format!(
                "series must be [N, T, F], got shape {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Validation("series contains non-finite values".into()));
        }
        let f = values.shape()[2];
        let feature_names = if f == 1 {
            vec!["value".to_string()]
        } else {
            (0..f).map(|i| format!("f{i}")).collect()
        };
        Ok(SeriesTensor {
            values,
            start_timestamp: None,
            step_seconds: None,
            feature_names,
        })
    }

    pub fn with_time(mut self, start: i64, step_seconds: i64) -> Result<Self> {
        if step_seconds <= 0 {
            return Err(Error::Validation(format!(
                "time step must be positive, got {step_seconds}"
            )));
        }
        self.start_timestamp = Some(start);
        self.step_seconds = Some(step_seconds);
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_features() {
            return Err(Error::Validation(format!(
                "{} feature names for {} features",
                names.len(),
                self.n_features()
            )));
        }
        self.feature_names = names;
        Ok(self)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn n_nodes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_features(&self) -> usize {
        self.values.shape()[2]
    }

    #[inline]
    pub fn at(&self, node: usize, t: usize, f: usize) -> f64 {
        let (tn, fs) = (self.n_steps(), self.n_features());
        self.values.data()[(node * tn + t) * fs + f]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }

    /// One node's trajectory of feature `f`.
    pub fn node_series(&self, node: usize, f: usize) -> Vec<f64> {
        (0..self.n_steps()).map(|t| self.at(node, t, f)).collect()
    }

    pub fn timestamp(&self, t: usize) -> Option<i64> {
        Some(self.start_timestamp? + t as i64 * self.step_seconds?)
    }

    /// Steps per day when timestamps exist and the step divides a day.
    pub fn steps_per_day(&self) -> Option<usize> {
        let s = self.step_seconds?;
        (86_400 % s == 0).then_some((86_400 / s) as usize)
    }

    /// Time-of-day slot and day-of-week (Monday = 0) of step `t`.
    pub fn calendar(&self, t: usize) -> Option<(usize, usize)> {
        let ts = self.timestamp(t)?;
        let s = self.step_seconds?;
        let secs = ts.rem_euclid(86_400);
        let days = ts.div_euclid(86_400);
        // 1970-01-01 was a Thursday.
        Some(((secs / s) as usize, (days + 3).rem_euclid(7) as usize))
    }

    /// Restricts to the time range `[start, end)`.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_steps() {
            return Err(Error::Validation(format!(
                "time range {start}..{end} outside 0..{}",
                self.n_steps()
            )));
        }
        let (n, f) = (self.n_nodes(), self.n_features());
        let mut data = Vec::with_capacity(n * (end - start) * f);
        for node in 0..n {
            for t in start..end {
                for k in 0..f {
                    data.push(self.at(node, t, k));
                }
            }
        }
        Ok(SeriesTensor {
            values: Tensor::new(vec![n, end - start, f], data)?,
            start_timestamp: self.timestamp(start),
            step_seconds: self.step_seconds,
            feature_names: self.feature_names.clone(),
        })
    }

    pub fn to_container(&self, dtype: DType) -> Container {
        Container::from_tensor(&self.values, dtype)
    }
}

pub fn load_series(path: &Path, format: SeriesFormat, opts: LoadOptions) -> Result<SeriesTensor> {
    match format {
        SeriesFormat::Container => {
            let c = Container::read(path)?;
            if c.dims.len() != 3 {
                return Err(Error::parse(
                    path,
                    "byte 4",
                    format!("series container must have rank 3, found rank {}", c.dims.len()),
                ));
            }
            SeriesTensor::new(c.to_tensor()?)
        }
        SeriesFormat::LongCsv => read_long_csv(path, opts),
    }
}

#[derive(Debug, serde::Deserialize)]
struct LongRow {
    timestamp: i64,
    node: usize,
    feature: String,
    value: f64,
}

fn read_long_csv(path: &Path, opts: LoadOptions) -> Result<SeriesTensor> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let expected = ["timestamp", "node", "feature", "value"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::parse(
            path,
            "line 1",
            format!("expected header `timestamp,node,feature,value`, found `{}`", headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut features: Vec<String> = Vec::new();
    let mut feature_idx: HashMap<String, usize> = HashMap::new();
    let mut cells: BTreeMap<(i64, usize, usize), (f64, u64)> = BTreeMap::new();
    let mut times = BTreeSet::new();
    let mut max_node = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: LongRow = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(path, format!("line {line}"), e.to_string()))?;
        if !row.value.is_finite() {
            return Err(Error::parse(path, format!("line {line}"), "non-finite value"));
        }
        let next = features.len();
        let f = *feature_idx.entry(row.feature.clone()).or_insert_with(|| {
            features.push(row.feature.clone());
            next
        });
        if let Some((_, prev)) = cells.insert((row.timestamp, row.node, f), (row.value, line)) {
            return Err(Error::parse(
                path,
                format!("line {line}"),
                format!(
                    "duplicate cell (timestamp {}, node {}, feature {}) first seen on line {prev}",
                    row.timestamp, row.node, row.feature
                ),
            ));
        }
        times.insert(row.timestamp);
        max_node = max_node.max(row.node);
    }
    if cells.is_empty() {
        return Err(Error::parse(path, "line 2", "no data rows"));
    }
    let times: Vec<i64> = times.into_iter().collect();
    let step = times.windows(2).map(|w| w[1] - w[0]).min().unwrap_or(1);
    if let Some(w) = times.windows(2).find(|w| (w[1] - w[0]) % step != 0) {
        return Err(Error::parse(
            path,
            format!("timestamp {}", w[1]),
            format!("irregular spacing: {} is not a multiple of the {step}s step", w[1] - w[0]),
        ));
    }
    if !opts.forward_fill {
        if let Some(w) = times.windows(2).find(|w| w[1] - w[0] != step) {
            return Err(Error::parse(
                path,
                format!("timestamp {}", w[0]),
                format!("gap: no rows between {} and {}", w[0], w[1]),
            ));
        }
    }
    let t0 = times[0];
    let n_steps = ((times[times.len() - 1] - t0) / step) as usize + 1;
    let (n, nf) = (max_node + 1, features.len());
    let mut data = vec![f64::NAN; n * n_steps * nf];
    for (&(ts, node, f), &(v, _)) in &cells {
        let t = ((ts - t0) / step) as usize;
        data[(node * n_steps + t) * nf + f] = v;
    }
    for node in 0..n {
        for f in 0..nf {
            for t in 0..n_steps {
                let i = (node * n_steps + t) * nf + f;
                if data[i].is_nan() {
                    if opts.forward_fill && t > 0 {
                        data[i] = data[i - nf];
                    } else {
                        return Err(Error::parse(
                            path,
                            format!("cell (timestamp {}, node {node}, feature {})", t0 + t as i64 * step, features[f]),
                            "missing value",
                        ));
                    }
                }
            }
        }
    }
    let series = SeriesTensor::new(Tensor::new(vec![n, n_steps, nf], data)?)?;
    let series = if step > 0 { series.with_time(t0, step)? } else { series };
    series.with_feature_names(features)
}

pub fn write_long_csv(series: &SeriesTensor, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["timestamp", "node", "feature", "value"])
        .map_err(|e| csv_err(path, e))?;
    for t in 0..series.n_steps() {
        let ts = series.timestamp(t).unwrap_or(t as i64);
        for node in 0..series.n_nodes() {
            for (f, name) in series.feature_names.iter().enumerate() {
                w.write_record([
                    ts.to_string(),
                    node.to_string(),
                    name.clone(),
                    format!("{:?}", series.at(node, t, f)),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    let location = e
        .position()
        .map(|p| format!("line {}", p.line()))
        .unwrap_or_else(|| "unknown position".to_string());
    if let csv::ErrorKind::Io(_) = e.kind() {
        return match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        };
    }
    Error::parse(path, location, e.to_string())
}
