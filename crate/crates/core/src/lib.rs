pub mod decoders;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod mesh_extraction;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
