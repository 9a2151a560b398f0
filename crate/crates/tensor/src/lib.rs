//! Dense `f64` tensors, a reverse-mode gradient tape, and the layers the
//! forecasting model is assembled from: linear maps, layer norm, residual
//! MLP blocks and multi-head attention.
//!
//! ```
//! use stb_tensor::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.add("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()).unwrap();
//! let mut g = Graph::with_params(&store);
//! let x = g.constant(Tensor::from_vec(vec![1.0, 1.0]));
//! let wv = g.param(w);
//! let y = g.matmul(x, wv).unwrap();
//! assert_eq!(g.value(y).data(), &[4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
pub mod optim;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, CheckMode, GradCheckError, GradCheckOptions, GradCheckReport};
pub use graph::{softmax_last, Gradients, Graph, Var};
pub use nn::{Linear, LayerNorm, MultiHeadAttention, Rmlp, RmlpStack};
pub use optim::{clip_global_norm, Adam};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
