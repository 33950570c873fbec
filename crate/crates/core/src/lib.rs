//! Image-text matching with multi-granularity aggregation, prototype
//! alignment, momentum memory banks and batch neighborhood graphs.

pub mod autodiff;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod momentum;
pub mod neighborhood;
pub mod params;
pub mod prototype;
pub mod tensorio;
pub mod trainer;

pub use error::{Error, Result};
