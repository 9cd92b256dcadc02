//! Small reverse-mode differentiation engine and the orientation model built
//! on it.

pub mod checkpoint;
pub mod loss;
pub mod model;
pub mod optim;
pub mod tape;

pub use checkpoint::Checkpoint;
pub use loss::{loss_ce, loss_mse_cos, loss_unsupervised};
pub use model::{
    predict_from_heads, sgd_step, sgd_update, standardize, BoundParams, Component, FreezeMask, HeadOutput, Layer, Model,
    ModelOutput, ModelSpec, Parameter, Prediction,
};
pub use optim::{adam_step, AdamState, Optimizer, OptimizerKind};
pub use tape::{Graph, NodeId, Tensor};
