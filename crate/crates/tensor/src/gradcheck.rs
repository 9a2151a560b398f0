//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-7, 1e-3]`.
    pub eps: f64,
    /// Stores with at most this many scalars are checked coordinate by
    /// coordinate; larger ones along random probe directions.
    pub max_coordinates: usize,
    pub probes: usize,
    pub seed: u64,
    /// Lower bound for the relative-error denominator.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            max_coordinates: 20_000,
            probes: 64,
            seed: 0,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckMode {
    Coordinates,
    Probes,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub mode: CheckMode,
    pub max_rel_error: f64,
    /// Parameter holding the worst coordinate (or `probe <k>`).
    pub worst: String,
    /// Worst relative error per parameter tensor, store order. Empty in probe mode.
    pub per_param: Vec<(String, f64)>,
    pub checked: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub min_kink_distance: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Debug, Error)]
pub enum GradCheckError<E: std::error::Error + 'static> {
    #[error("gradcheck configuration: {0}")]
    Config(String),
    #[error("objective failed at the evaluation point: {0}")]
    Base(#[source] E),
    #[error("objective non-finite or failing while perturbing `{param}`[{index}]: {source}")]
    Perturbed {
        param: String,
        index: usize,
        #[source]
        source: E,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn relative_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn evaluate<E, F>(store: &ParamStore, f: &F) -> Result<f64, E>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
{
    let mut g = Graph::with_params(store);
    let loss = f(&mut g)?;
    Ok(g.value(loss).item())
}

/// Compares the reverse-mode gradient of the scalar built by `f` against
/// central differences `(f(θ+εe) − f(θ−εe)) / 2ε`.
pub fn grad_check<E, F>(
    store: &ParamStore,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport, GradCheckError<E>>
where
    F: Fn(&mut Graph) -> Result<Var, E>,
    E: std::error::Error + From<TensorError> + 'static,
{
    if !(1e-7..=1e-3).contains(&opts.eps) {
        return Err(GradCheckError::Config(format!(
            "eps {} outside [1e-7, 1e-3]",
            opts.eps
        )));
    }
    let (objective, analytic, min_kink) = {
        let mut g = Graph::with_params(store);
        let loss = f(&mut g).map_err(GradCheckError::Base)?;
        let value = g.value(loss).item();
        let grads = g.backward(loss)?;
        (value, grads.flat(store), g.min_kink_distance())
    };
    let gradient_norm = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let base = store.flatten();
    let mut work = store.clone();
    let eps = opts.eps;

    let mut eval_at = |point: &[f64], blame: Option<usize>| -> Result<f64, GradCheckError<E>> {
        work.assign_flat(point)?;
        let blame_err = |source: E| {
            let (param, index) = blame
                .and_then(|i| store.locate(i))
                .map(|(p, i)| (p.to_string(), i))
                .unwrap_or_else(|| ("<probe direction>".to_string(), 0));
            GradCheckError::Perturbed { param, index, source }
        };
        let v = evaluate(&work, &f).map_err(blame_err)?;
        if !v.is_finite() {
            return Err(blame_err(
                TensorError::NonFinite { op: "objective" }.into(),
            ));
        }
        Ok(v)
    };

    if base.len() <= opts.max_coordinates {
        let mut per_param: Vec<(String, f64)> =
            store.iter().map(|(_, n, _)| (n.to_string(), 0.0)).collect();
        let offsets = store.offsets();
        let mut point = base.clone();
        let mut max_err = 0.0;
        let mut worst = String::new();
        let mut tensor = 0;
        for i in 0..base.len() {
            while tensor + 1 < offsets.len() && i >= offsets[tensor + 1] {
                tensor += 1;
            }
            point[i] = base[i] + eps;
            let plus = eval_at(&point, Some(i))?;
            point[i] = base[i] - eps;
            let minus = eval_at(&point, Some(i))?;
            point[i] = base[i];
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric, opts.denom_floor);
            if err > per_param[tensor].1 {
                per_param[tensor].1 = err;
            }
            if err > max_err {
                max_err = err;
                worst = per_param[tensor].0.clone();
            }
        }
        Ok(GradCheckReport {
            mode: CheckMode::Coordinates,
            max_rel_error: max_err,
            worst,
            per_param,
            checked: base.len(),
            objective,
            gradient_norm,
            min_kink_distance: min_kink,
        })
    } else {
        let mut rng = rand::rngs::StdRng::seed_from_u64(opts.seed);
        let mut max_err = 0.0;
        let mut worst = String::new();
        let scale = 1.0 / (base.len() as f64).sqrt();
        for k in 0..opts.probes {
            let dir: Vec<f64> = (0..base.len())
                .map(|_| if rng.random::<bool>() { scale } else { -scale })
                .collect();
            let a: f64 = dir.iter().zip(&analytic).map(|(d, g)| d * g).sum();
            let plus: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b + eps * d).collect();
            let minus: Vec<f64> = base.iter().zip(&dir).map(|(b, d)| b - eps * d).collect();
            let numeric = (eval_at(&plus, None)? - eval_at(&minus, None)?) / (2.0 * eps);
            let err = relative_error(a, numeric, opts.denom_floor);
            if err > max_err {
                max_err = err;
                worst = format!("probe {k}");
            }
        }
        Ok(GradCheckReport {
            mode: CheckMode::Probes,
            max_rel_error: max_err,
            worst,
            per_param: Vec::new(),
            checked: opts.probes,
            objective,
            gradient_norm,
            min_kink_distance: min_kink,
        })
    }
}
