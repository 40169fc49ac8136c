//! Hierarchical Gaussian world model for bimanual manipulation.
//!
//! The crate bundles a small reverse-mode autodiff tape, a differentiable
//! tile-based Gaussian splatting rasterizer, the learned leader/follower
//! scene-propagation models with an action-decoding head, the training
//! objectives, a deterministic synthetic two-arm environment, and the
//! trainer that ties them together.

pub mod action;
pub mod autodiff;
pub mod camera;
pub mod error;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod models;
pub mod raster;
pub mod synth;
pub mod trainer;
pub mod types;
pub mod world_model;

pub use error::{Error, Result};
