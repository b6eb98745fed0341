pub mod actor;
pub mod autodiff;
pub mod critic;
pub mod diag;
pub mod distributional;
pub mod envs;
pub mod error;
pub mod stats;
pub mod trainer;

pub use error::{IdacError, Result};
