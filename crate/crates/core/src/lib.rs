//! Spike-camera stereo depth estimation with uncertainty-guided fusion.

pub mod dataio;
pub mod error;
pub mod eval;
pub mod fuse;
pub mod loss;
pub mod net;
pub mod raster;
pub mod scene;
pub mod spike;
pub mod train;

pub use error::{Error, Result};
pub use raster::{DepthMap, DisparityMap, Grid, UncertaintyMap};
