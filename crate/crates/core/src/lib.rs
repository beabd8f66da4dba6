//! Forward-Forward training with per-layer instrumentation.
//!
//! - [`nn`]: dense matrices and SGD with momentum
//! - [`data`]: MNIST IDX loading, label embedding, positive/negative batches
//! - [`model`]: FF layers, local losses and gradients, per-layer accuracy
//! - [`downstream`]: linear softmax head for overall-model accuracy
//! - [`experiment`]: configured runs, sweeps and the metrics CSV
//! - [`analysis`]: accuracy curves, delay-to-target and layer/model correlation

pub mod analysis;
pub mod data;
pub mod downstream;
pub mod experiment;
pub mod model;
pub mod nn;
