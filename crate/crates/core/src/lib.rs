//! Sliding-window dense monocular SLAM driving a differentiable 3D Gaussian
//! splatting map.

pub mod bench;
pub mod config;
pub mod error;
pub mod eval;
pub mod frontend;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod splat;
pub mod synth;
pub mod tracking;

pub use error::{Error, Result};
