//! Cascaded three-stage CNN for facial attribute classification, with a
//! small reverse-mode autodiff engine underneath.

pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod weighting;

pub use cascade::{batch_predict, predict, CascadeStats, CascadeThresholds, PredictionResult, PredictionStatus};
pub use config::ModelConfig;
pub use graph::{Graph, OpCounter, OpKind, Var};
pub use model::{McfaModel, Session, StageId};
pub use par::Execution;
pub use tensor::{Tensor, TensorError};
pub use trainer::{evaluate, train, Metrics, TrainConfig, Variant};
pub use weighting::Weighting;
