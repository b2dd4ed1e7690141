pub mod config;
pub mod error;
pub mod fixtures;
pub mod graph;
pub mod layers;
pub mod model;
pub mod parallel;
pub mod params;
pub mod run;
pub mod training;
pub mod verify;
pub mod tensor;

pub use error::{CheckpointError, Error, Result};
