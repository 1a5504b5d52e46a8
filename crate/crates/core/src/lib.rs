//! Exposure-robust dynamic Gaussian splatting on the CPU.

pub mod camera;
pub mod config;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod illumination;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
