//! Stacking window samples into model inputs.

use stb_tensor::Tensor;

use crate::data::WindowPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, N, T_short, F]`
    pub x_short: Tensor,
    /// `[B, N, T_long, F]`
    pub x_long: Tensor,
    /// `[B, N, T_out]`
    pub target: Tensor,
    /// `(time-of-day, weekday)` of every short step, `B * T_short` entries.
    pub calendar: Option<Vec<(usize, usize)>>,
    /// Anchor step of each sample.
    pub ends: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[WindowPair]) -> Result<Self> {
        let first = pairs
            .first()
            .ok_or_else(|| Error::Validation("cannot batch zero samples".into()))?;
        let b = pairs.len();
        let stack = |get: &dyn Fn(&WindowPair) -> &Tensor, shape: Vec<usize>| -> Result<Tensor> {
            let per = get(first).len();
            let mut data = Vec::with_capacity(b * per);
            for p in pairs {
                let t = get(p);
                if t.shape() != get(first).shape() {
                    return Err(Error::Validation(format!(
                        "ragged batch: {:?} vs {:?}",
                        t.shape(),
                        get(first).shape()
                    )));
                }
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::new(shape, data)?)
        };
        let s = first.x_short.shape();
        let l = first.x_long.shape();
        let t = first.target.shape();
        let calendar = pairs
            .iter()
            .map(|p| p.calendar.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        Ok(Batch {
            x_short: stack(&|p| &p.x_short, vec![b, s[0], s[1], s[2]])?,
            x_long: stack(&|p| &p.x_long, vec![b, l[0], l[1], l[2]])?,
            target: stack(&|p| &p.target, vec![b, t[0], t[1]])?,
            calendar,
            ends: pairs.iter().map(|p| p.end).collect(),
        })
    }

    /// Batch size.
    pub fn len(&self) -> usize {
        self.x_short.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_nodes(&self) -> usize {
        self.x_short.shape()[1]
    }
}
