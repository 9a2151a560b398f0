//! Series ingestion, normalisation, chronological splits, window sampling
//! and synthetic data.

mod container;
mod normalize;
mod series;
mod synth;
mod window;

pub use container::{Container, DType, Payload, MAGIC};
pub use normalize::{zscore, Normalizer, SplitRanges, SplitSpec};
pub(crate) use series::csv_err;
pub use series::{load_series, write_long_csv, LoadOptions, SeriesFormat, SeriesTensor};
pub use synth::{synth_generate, SynthDataset, SynthLayout, SynthProfile};
pub use window::{materialize, window_sampler, WindowPair, WindowShape, Windows};
