//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! backward rule; [`Graph::backward`] then sweeps the tape in reverse. The
//! operator set covers what the stereo/monocular depth network needs:
//! 2D/3D (transposed) convolutions, batch normalization, bilinear
//! upsampling, softmax, the usual activations and pointwise arithmetic.

pub mod adam;
pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod ops;
pub mod suite;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, StepSchedule};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{BackwardFn, Gradients, Graph, Mode, Var};
pub use ops::norm::BatchStats;
pub use params::ParamStore;
pub use tensor::Tensor;
