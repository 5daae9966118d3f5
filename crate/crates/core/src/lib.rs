//! Directional-window volumetric transformer toolkit.
//!
//! Dense tensors with reverse-mode differentiation, directional window
//! partitioning, the attention blocks built on it, the hierarchical
//! segmentation network, losses and evaluation metrics, and a synthetic
//! labelled-volume generator.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod verify;
pub mod volume;
pub mod windowing;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
