pub mod adapt;
pub mod autodiff;
mod codec;
pub mod detector;
pub mod error;
pub mod experiment;
pub mod fsio;
pub mod nn;
pub mod par;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
