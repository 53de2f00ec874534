//! Stratified recurrent-event intensity models for zero-truncated data,
//! with optional census augmentation and multiplier-resampling variances.

pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod numeric;
pub mod simulate;
pub mod variance;
pub mod zt;
pub mod census_fit;

pub use error::{Error, Result};
