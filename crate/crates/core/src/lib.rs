//! GraphCorr: a plug-in graph network that turns multichannel time series
//! into dynamic, lag-aware node features for downstream graph classifiers.
//!
//! The pipeline per subject:
//!
//! 1. [`signal`] computes static and sliding-window Pearson connectivity and
//!    thresholds the static matrix into a graph.
//! 2. [`embedder`] runs a single-layer transformer encoder over each
//!    window's connectivity matrix to get node embeddings.
//! 3. [`lagfilter`] cross-correlates connected node pairs over a range of
//!    lags and maps the lag profiles through learnable filters.
//! 4. [`fusion`] passes embedding ⊗ lag-activation messages along edges
//!    and concatenates the aggregate with the window-averaged embedding.
//! 5. [`model`] feeds either those features or raw static connectivity into
//!    a two-layer GCN or SAGE classifier.
//!
//! [`train`] runs nested cross-validation, [`explain`] computes gradient
//! saliency, and [`synth`] generates datasets with planted lagged couplings.
//! Everything differentiable runs on the [`tensor`] autodiff tape.

pub mod config;
pub mod embedder;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod fusion;
pub mod lagfilter;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod signal;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, ErrorClass, Result};
pub use tensor::{Tensor, Tape, Var};
