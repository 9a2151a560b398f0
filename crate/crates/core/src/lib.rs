//! Spatiotemporal forecasting with low-rank spatial embeddings and
//! multi-scale temporal attention.
//!
//! The pipeline: a prior graph is compressed into an `N × M` node embedding
//! ([`graph`]), each node's recent and long-range history is encoded by an
//! attention pathway ([`temporal`]), and stacked fusion layers combine the
//! two per node ([`fusion`]) before a linear head emits the forecast.
//! [`train`] fits the assembled [`model::StBalance`] and scores it
//! against naive baselines; [`entropy`] offers the spatial/temporal
//! complexity diagnostic used to pick window lengths.

pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod entropy;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod temporal;
pub mod train;

pub use error::{Error, Result};
