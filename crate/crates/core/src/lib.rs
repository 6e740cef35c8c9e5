pub mod augment;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod grid;
pub mod model;
pub mod posttrain;
pub mod training;
pub mod vote;

pub use error::{Result, TrmError};
