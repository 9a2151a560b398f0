//! Forecast verification scores.
//!
//! All functions take flattened, aligned observation/prediction slices;
//! they should be applied to values on the original (denormalised) scale.

use std::path::Path;

use crate::data::csv_err;
use crate::error::{Error, Result};

fn check(y: &[f64], p: &[f64], metric: &'static str) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::Metric {
            metric,
            msg: format!("length mismatch: {} observations, {} predictions", y.len(), p.len()),
        });
    }
    if y.is_empty() {
        return Err(Error::Metric { metric, msg: "no values".into() });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn degenerate(metric: &'static str) -> Error {
    Error::Metric {
        metric,
        msg: "observations have zero variance".into(),
    }
}

pub fn mae(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p, "mae")?;
    Ok(y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn rmse(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p, "rmse")?;
    Ok((y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

/// Population means, standard deviations and covariance.
fn moments(y: &[f64], p: &[f64]) -> (f64, f64, f64, f64, f64) {
    let (my, mp) = (mean(y), mean(p));
    let n = y.len() as f64;
    let (mut vy, mut vp, mut c) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(p) {
        vy += (a - my) * (a - my);
        vp += (b - mp) * (b - mp);
        c += (a - my) * (b - mp);
    }
    (my, mp, (vy / n).sqrt(), (vp / n).sqrt(), c / n)
}

pub fn pcc(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p, "pcc")?;
    let (_, _, sy, sp, c) = moments(y, p);
    if sy == 0.0 {
        return Err(degenerate("pcc"));
    }
    if sp == 0.0 {
        return Err(Error::Metric { metric: "pcc", msg: "predictions have zero variance".into() });
    }
    Ok((c / (sy * sp)).clamp(-1.0, 1.0))
}

pub fn r2(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p, "r2")?;
    let my = mean(y);
    let ss_tot: f64 = y.iter().map(|a| (a - my).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(degenerate("r2"));
    }
    let ss_res: f64 = y.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn kge(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p, "kge")?;
    let (my, mp, sy, sp, c) = moments(y, p);
    if sy == 0.0 {
        return Err(degenerate("kge"));
    }
    if my == 0.0 {
        return Err(Error::Metric { metric: "kge", msg: "observations have zero mean".into() });
    }
    let r = if sp == 0.0 { 0.0 } else { c / (sy * sp) };
    Ok(1.0 - ((r - 1.0).powi(2) + (sp / sy - 1.0).powi(2) + (mp / my - 1.0).powi(2)).sqrt())
}

pub fn mnse(y: &[f64], p: &[f64]) -> Result<f64> {
    check(y, p, "mnse")?;
    let my = mean(y);
    let denom: f64 = y.iter().map(|a| (a - my).abs()).sum();
    if denom == 0.0 {
        return Err(degenerate("mnse"));
    }
    Ok(1.0 - y.iter().zip(p).map(|(a, b)| (a - b).abs()).sum::<f64>() / denom)
}

/// Fraction of nodes whose own NSE exceeds `threshold`. `y` and `p` are
/// node-major chunks of `cells_per_node` values.
pub fn pnse(y: &[f64], p: &[f64], cells_per_node: usize, threshold: f64) -> Result<f64> {
    check(y, p, "pnse")?;
    if cells_per_node == 0 || y.len() % cells_per_node != 0 {
        return Err(Error::Metric {
            metric: "pnse",
            msg: format!("{} values do not split into nodes of {cells_per_node}", y.len()),
        });
    }
    let nodes = y.len() / cells_per_node;
    let mut good = 0;
    for k in 0..nodes {
        let r = k * cells_per_node..(k + 1) * cells_per_node;
        let nse = r2(&y[r.clone()], &p[r]).map_err(|_| Error::Metric {
            metric: "pnse",
            msg: format!("node {k} has zero-variance observations"),
        })?;
        if nse > threshold {
            good += 1;
        }
    }
    Ok(good as f64 / nodes as f64)
}

/// All scores for one slice of a forecast. Scores undefined for the data
/// are NaN and listed in `undefined`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSuite {
    pub mae: f64,
    pub rmse: f64,
    pub pcc: f64,
    pub r2: f64,
    pub kge: f64,
    pub mnse: f64,
    pub pnse: f64,
    pub undefined: Vec<&'static str>,
}

impl MetricSuite {
    pub const COLUMNS: [&'static str; 7] = ["mae", "rmse", "pcc", "r2", "kge", "mnse", "pnse"];

    /// `y`/`p` node-major with `cells_per_node` values per node.
    pub fn compute(y: &[f64], p: &[f64], cells_per_node: usize, pnse_threshold: f64) -> Result<Self> {
        let mut undefined = Vec::new();
        let mut soft = |name: &'static str, r: Result<f64>| match r {
            Ok(v) => v,
            Err(Error::Metric { .. }) => {
                undefined.push(name);
                f64::NAN
            }
            Err(_) => unreachable!("metric functions only raise metric errors"),
        };
        let m = MetricSuite {
            mae: mae(y, p)?,
            rmse: rmse(y, p)?,
            pcc: soft("pcc", pcc(y, p)),
            r2: soft("r2", r2(y, p)),
            kge: soft("kge", kge(y, p)),
            mnse: soft("mnse", mnse(y, p)),
            pnse: soft("pnse", pnse(y, p, cells_per_node, pnse_threshold)),
            undefined,
        };
        Ok(m)
    }

    pub fn row(&self, label: &str) -> Vec<String> {
        let f = |v: f64| format!("{v:.6}");
        vec![
            label.to_string(),
            f(self.mae),
            f(self.rmse),
            f(self.pcc),
            f(self.r2),
            f(self.kge),
            f(self.mnse),
            f(self.pnse),
        ]
    }
}

/// Writes labelled suites; `label` names the first column.
pub fn write_metrics_csv(path: &Path, label: &str, rows: &[(String, &MetricSuite)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec![label];
    header.extend(MetricSuite::COLUMNS);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (label, m) in rows {
        w.write_record(m.row(label)).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
