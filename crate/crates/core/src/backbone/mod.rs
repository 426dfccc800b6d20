//! Hierarchical encoder, heads and model assembly.

mod config;
mod encoder;
mod heads;
mod layers;
mod model;
mod plan;

pub use config::{EmbeddingKind, HeadKind, ModelConfig, Sampling, STAGES};
pub use encoder::{Encoded, Encoder, Stage};
pub use heads::{ClassifierHead, SegmentationHead};
pub use layers::{BatchNorm, Linear, LinearBnRelu, ResidualBlock};
pub use model::{Head, Model};
pub use plan::{Plan, StagePlan, IDW_EPS, IDW_NEIGHBORS, IDW_POWER};
