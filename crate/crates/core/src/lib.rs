//! Voxel radiance field training plus a latent-diffusion restorer that
//! removes its aliasing artifacts.

mod error;

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod diffusion;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod radiance_field;
pub mod restoration;
pub mod scene;
pub mod tiling;

pub use error::{Error, Result};
