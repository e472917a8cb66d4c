//! Flood nowcasting on a graph of geographic units with an attention-based
//! spatial-temporal graph convolutional network.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` arrays with tape-based reverse-mode autodiff.
//! - [`graph`]: adjacency from centroids and static features, Laplacians and
//!   the Chebyshev basis.
//! - [`features`]: raw gauge/event/road-status streams to an aligned
//!   `nodes x 6 x timesteps` tensor with class labels.
//! - [`model`]: the spatial-temporal blocks and classification head.
//! - [`trainer`]: windowing, weighted cross-entropy, Adam, grid tuning.
//! - [`metrics`]: confusion matrix and macro precision/recall/F1.
//! - [`scenario`]: a seeded synthetic flood generator that emits the same
//!   files the pipeline ingests.
//! - [`io`]: CSV schemas, the dataset container and the weight file format.

pub mod error;
pub mod features;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod scenario;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{FeatureTensor, Grid, CHANNELS};
pub use graph::{RegionGraph, StaticFeatures, UnitNode};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use model::{Ablation, ChannelSet, ModelConfig, ModelParams};
pub use scenario::{ScenarioConfig, ScenarioDataset};
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{TrainConfig, TrainHistory};
