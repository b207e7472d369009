//! Multiple-instance learning with shuffled patch instances (MIL-SI) on a
//! small Vision Transformer, plus the synthetic-data harness used to
//! exercise it.
//!
//! Module map:
//! - [`tensor`]: dense tensors and reverse-mode autodiff
//! - [`bagging`]: patch splitting, patch/bag soft labels, the two distributors
//! - [`model`]: Transformer backbone, MIL head, CLS head, attention rollout, checkpoints
//! - [`trainer`]: the two-step training loop, optimizer, schedule, metrics
//! - [`synthdata`]: synthetic labeled images, augmentation, on-disk datasets
//! - [`cli`]: command implementations behind the `milsi` binary

pub mod bagging;
pub mod cli;
pub mod error;
pub mod image;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
