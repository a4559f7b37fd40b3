pub mod checkpoint;
pub mod conditioning;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod morpho;
pub mod nn;
pub mod real;
pub mod sampler;
pub mod stats;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
