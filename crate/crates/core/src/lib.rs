pub mod data;
pub mod decoding;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
