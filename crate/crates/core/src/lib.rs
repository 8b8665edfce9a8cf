//! Neural-field demosaicking of GBRG Bayer images.

pub mod autodiff;
pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod gradcheck;
pub mod optim;
pub mod fsutil;
pub mod image;
pub mod metrics;
pub mod baselines;
pub mod model;
pub mod checkpoint;
pub mod inference;
pub mod dataset;
pub mod train;
