//! Semicircle-pretrained orientation estimation.
//!
//! An orientation `θ ∈ (-π, π]` is split into a left/right semicircle label
//! and a folded angle in `[0, π]`. A small convolutional model learns the
//! label with a classifier head and `cos φ` with a regressor head, trained in
//! stages with per-component freezing. The crate also ships a synthetic
//! dataset generator with adjustable front/back ambiguity, evaluation
//! histograms, and KITTI-style average orientation similarity.
//!
//! Modules:
//! - [`angle`]: wrapping, decomposition, reconstruction, mirroring
//! - [`synth`]: procedural images, flip augmentation, dataset container
//! - [`nn`]: autodiff tape, model, losses, SGD, checkpoints
//! - [`train`]: staged schedules (vanilla, supervised, semisupervised)
//! - [`eval`]: error histograms, reports, AOS
//! - [`kitti`]: KITTI label files

pub mod angle;
pub mod error;
pub mod eval;
pub mod kitti;
pub mod nn;
pub mod synth;
pub mod train;

pub use angle::{
    angular_error, decompose, mirror, orientation_similarity, reconstruct, step_epsilon, wrap, AngularError,
    Orientation, OrientationDecomposition,
};
pub use error::{AngleError, DatasetError, EvalError, KittiError, NnError, TrainError};
