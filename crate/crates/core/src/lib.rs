//! Core library of a desk-scale geospatial segmentation platform.

pub mod dataprep;
pub mod error;
pub mod geo;
pub mod inference;
pub mod kernel;
pub mod labels;
pub mod postprocess;
pub mod rng;
pub mod store;

pub use error::{Error, Result};
