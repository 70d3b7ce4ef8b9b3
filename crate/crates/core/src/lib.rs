//! Concealed object segmentation as foreground/background separation.
//!
//! The image is modelled as `C = C·M + B` with a mask `M` and background
//! `B`. [`solver`] minimises the resulting energy by alternating exact
//! closed-form updates with explicit proximal steps; [`unfolded`] turns
//! each iteration into a trainable stage with learned scalars, learned
//! refinement and a reconstruction head.

pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod solver;
pub mod synth;
pub mod tensor;
pub mod unfolded;

pub use error::{ConfigError, Error, Result};
pub use tensor::{ImageTensor, MaskMap, Tensor};
