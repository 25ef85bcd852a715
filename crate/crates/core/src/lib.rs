pub mod adversarial;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod phantom;
pub mod render;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
