pub mod captioner;
pub mod cli;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod trainer;
pub mod volumes;

pub use error::{Error, Result};
