//! Unsupervised single-image segmentation by self-supervised clustering.
//!
//! A small convolutional network is trained from scratch on each image. Its
//! per-pixel argmax cluster assignments serve as its own training targets,
//! and two spatial terms (an L1 smoothness penalty and a centroid
//! compactness penalty) steer the clusters toward coherent regions.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense arrays, reverse-mode autodiff, SGD and a
//!   finite-difference gradient checker
//! - [`segnet`]: the three-block convolutional network
//! - [`losses`]: cross-entropy, sparse spatial and context-consistency losses
//! - [`trainer`]: the per-image training loop and loss ablation
//! - [`baselines`]: k-means pixel clustering
//! - [`metrics`]: DSC / Hammoude / XOR with largest-overlap matching
//! - [`synthetic`] and [`checks`]: seeded test images and the gradient checks
//! - [`io`] and [`harness`]: dataset ingestion, label-map export and the
//!   batch runners behind the `sgscn` binary

pub mod baselines;
pub mod checks;
pub mod error;
pub mod harness;
pub mod io;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod segnet;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use labels::{BinaryMask, LabelMap};
pub use tensor::{Float, Tensor};
