//! Similarity-preserving knowledge distillation for small convolutional networks.
//!
//! A student network is trained to reproduce the pairwise activation
//! similarities a frozen teacher produces within each mini-batch, optionally
//! alongside soft-target distillation or attention transfer.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod gradcheck;
mod kernels;
pub mod losses;
pub mod model;
pub mod optim;
pub mod similarity;
pub mod stats;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use losses::{DistillConfig, LabelBatch, Method};
pub use model::{ConvNetSpec, Network};
pub use similarity::{sp_loss, LayerPairSet, Taps};
pub use tensor::{Float, Precision, Tensor};
