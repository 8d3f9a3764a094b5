//! Sensorless localization of 2D cross-sectional slices in the coordinate
//! frame of a 3D atlas volume.
//!
//! The crate is organized bottom-up:
//!
//! - [`geom3d`]: anchor-point plane parameterization, displacements, pose
//!   sampling and geometric predicates.
//! - [`volume`]: dense volumes, synthetic phantoms, trilinear slicing,
//!   appearance shifts, sweeps and the `.uvol` / slice bundle formats.
//! - [`diffnet`]: a small tape-based reverse-mode autodiff engine, the
//!   convolutional encoder with location/displacement heads, augmentation
//!   and ADAM.
//! - [`pipeline`]: supervised training, cycle-consistency fine-tuning and
//!   inference.
//! - [`metrics`]: ED, DA, NCC, rate-of-change and NSTD evaluation.
//! - [`implicit`]: coordinate-network volume fields, fitting, pose
//!   refinement and rendering.
//!
//! Data-parallel loops go through [`par`]; with the `parallel` feature
//! disabled (or [`par::Exec::Sequential`] selected) everything runs on the
//! calling thread and results are bitwise identical either way.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diffnet;
pub mod error;
pub mod geom3d;
pub mod implicit;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod volume;

pub use error::{Error, Result};
pub use geom3d::{Displacement, PlaneLocation, PoseSpec, SliceExtent};
pub use volume::{SliceImage, Volume};
