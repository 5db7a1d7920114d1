//! Point-supervised density regression for object counting.
//!
//! The crate covers the whole pipeline: annotation handling, ground-truth
//! density and segmentation maps, a segmentation-gated encoder/decoder
//! network with its training loop, peak-based localization and evaluation.

pub mod annotations;
pub mod cli;
pub mod error;
pub mod groundtruth;
pub mod imaging;
pub mod io;
pub mod localization;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod raster;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
