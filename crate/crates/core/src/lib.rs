pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod constructions;
pub mod datagen;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod model;
pub mod numeric;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
