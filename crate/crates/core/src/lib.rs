//! Differentiable view synthesis and self-supervised depth optimization.

pub mod augment;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod image;
pub mod io;
pub mod objective;
pub mod optimizer;
pub mod photometric;
pub mod regularizer;
pub mod synthetic;
pub mod warp;

pub use error::{Error, Result};
pub use image::ImageGrid;
