pub mod checkpoint;
pub mod config;
pub mod data;
pub mod domain;
pub mod encoder;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod params;
pub mod suite;
pub mod training;

pub use error::{Error, Result};
