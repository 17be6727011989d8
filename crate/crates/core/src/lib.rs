//! Exact and differentiable integral-geometric descriptors of 2-D scalar fields.

pub mod analytic;
pub mod autodiff;
pub mod diagnostics;
pub mod emulator;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod persistence;
pub mod targets;

pub use error::{Error, Result};
pub use grid::{Field2D, NormalizationSpec, Units};
