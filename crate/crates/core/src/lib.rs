//! Semantic segmentation engine: a small reverse-mode autodiff core, the
//! FCN / SegNet / U-Net / residual U-Net families with a 5-class Gleason
//! labeling head, Dice training and quadratic-kappa evaluation.

pub mod arch;
pub mod cli;
pub mod error;
pub mod data;
pub mod gradcheck;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Result, SegError};
pub use labels::{GleasonClass, LabelMap, NUM_CLASSES};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Shape, Tensor};
