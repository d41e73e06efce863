//! Region-oriented logo classification: a navigator proposes informative
//! regions, a teacher ranks them by confidence, an augmentor crops and drops
//! inside them, and a scrutinizer fuses the full image with the augmented
//! regions.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below name the common instantiations.

pub mod augmentor;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod navigator;
pub mod net;
pub mod overlay;
pub mod scalar;
pub mod scrutinizer;
pub mod teacher;
pub mod tensor;
pub mod trainer;

pub mod cli;

pub use error::{DrnaError, Result};
pub use geometry::{BoxRegion, ScoredRegion};
pub use net::image::ImageTensor;
pub use net::model::{ArchConfig, ModelState};
pub use scalar::Scalar;
pub use trainer::config::{Method, TrainConfig};

pub type Model32 = ModelState<f32>;
pub type Model64 = ModelState<f64>;
pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type Sample32 = trainer::Sample<f32>;
