//! Reverse-mode autodiff, the slice encoder with location and displacement
//! heads, augmentation, ADAM and checkpoints.

mod adam;
mod augment;
mod checkpoint;
mod gradcheck;
mod model;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use augment::{augment, AugmentSpec};
pub use checkpoint::{
    blob_path, read_checkpoint, write_checkpoint, Checkpoint, CheckpointKind, CHECKPOINT_FORMAT,
};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, Precision, ScalarFn};
pub use model::{Bound, Layer, ModelParams, NetConfig, Trainable};
pub use tape::{Grads, Tape, Var};
pub use tensor::{Real, Tensor};
