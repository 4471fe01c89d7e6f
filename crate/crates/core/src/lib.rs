//! Decomposition of a Gaussian splatting scene into interactive parts.
pub mod agent;
pub mod assemble;
pub mod assets;
pub mod backend;
pub mod collision;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod restore;
pub mod scene;
pub mod segment;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
