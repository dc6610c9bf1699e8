//! Spatiotemporal kriging with a graph transformer.
//!
//! The crate estimates traffic-speed time series at sensor-less nodes of a
//! road graph from the series observed at the other nodes. Modules, bottom up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape
//! - [`graph`]: distance-kernel adjacency, normalized Laplacian, eigenmaps
//! - [`embedding`]: sinusoidal temporal and eigenmap spatial embeddings
//! - [`attention`]: temporal, spatial and interaction attention, FFN
//! - [`model`]: the encoder-decoder and its checkpoint format
//! - [`training`]: random node masking, loss, Adam and the training loop
//! - [`evaluation`]: metrics, baselines, SM scenarios, sweeps and ablations
//! - [`io`]: CSV loaders, synthetic data and run configuration

pub mod attention;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod io;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{GraphFeatures, KeepRule, SensorGraph};
pub use io::{DatasetBundle, RunConfig, SpeedTensor};
pub use model::{Ablation, Hyper, KriformerModel};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::{grad_check, Tape, Tensor, Var};
