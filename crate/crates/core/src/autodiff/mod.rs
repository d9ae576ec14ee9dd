//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Convolutions are cross-correlations (no kernel flip) with zero padding.
//! ReLU and the L1 loss use a zero subgradient at their kinks.

pub mod conv;
mod gradcheck;
mod graph;
mod tensor;

pub use conv::ConvGeom;
pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{Graph, Var};
pub use tensor::{Real, Tensor};
