//! Lensless phase retrieval with a residual encoder-decoder trained on
//! simulated diffraction intensities.

pub mod autodiff;
pub mod config;
pub mod datasets;
pub mod error;
pub mod experiments;
pub mod image;
pub mod network;
pub mod optics;
pub mod training;

pub use error::{Error, Result};
