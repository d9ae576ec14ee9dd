//! Residual encoder-decoder mapping a normalized intensity image to a phase
//! estimate in `[-pi, 0]`.
//!
//! Down blocks halve the resolution with a stride-2 convolution and a
//! stride-2 1x1 shortcut. Up blocks double it with a 4x4 transposed
//! convolution and a 2x2 transposed shortcut, then optionally concatenate an
//! encoder level and project back with a 1x1 convolution. Tail blocks are
//! plain residual blocks.

mod checkpoint;
mod model;
mod spec;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_expecting, save_checkpoint,
    CheckpointMeta, MAGIC, VERSION,
};
pub use model::{parameter_shapes, Model, Recorded};
pub use spec::{Head, NetworkSpec};
