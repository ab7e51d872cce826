//! Dual-track mitotic-figure analysis: disk-target detection by binary
//! segmentation, and atypical-versus-normal classification with low-rank
//! adapters, plus the shared splitting/sampling/augmentation/evaluation
//! machinery and file formats used by the `mitokit` CLI.

pub mod augment;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod inference;
pub mod lora;
pub mod losses;
pub mod models;
pub mod nn;
pub mod sampling;
pub mod scalar;
pub mod splitting;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for training and inference.
pub type F = f32;
/// Wide scalar type used where tight numeric tolerances matter.
pub type Wide = f64;
