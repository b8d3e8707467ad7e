//! DistanceNet: traveled-distance estimation from monocular image sequences.

pub mod checks;
pub mod codec;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
