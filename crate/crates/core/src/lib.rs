pub mod attention;
pub mod baselines;
pub mod cli;
pub mod data;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod mult;
pub mod nn;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
