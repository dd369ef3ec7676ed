//! Desk-scale generative object compositing: synthetic scene rendering, a
//! counterfactual-pair data pipeline, a conditional pixel-space diffusion
//! model with object-token conditioning and a mask head, staged training,
//! deterministic sampling, and placement metrics.
//!
//! Everything numeric is generic over [`num::Scalar`]; concrete aliases for
//! the shipped precisions live at the crate root.

pub mod ckpt;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod geom;
pub mod imgio;
pub mod mask;
pub mod model;
pub mod nn;
pub mod num;
pub mod raster;
pub mod rng;
pub mod sampler;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
pub use geom::{BBox, Canvas};
pub use num::{Dtype, Scalar};

/// Training precision.
pub type TrainScalar = f32;
/// Verification precision for gradient checks and oracles.
pub type CheckScalar = f64;

pub type ImageF32 = raster::Image<f32>;
pub type ImageF64 = raster::Image<f64>;
pub type SceneSampleF32 = scene::SceneSample<f32>;
pub type CheckpointF32 = model::StageCheckpoint<f32>;
