pub mod error;
pub mod evalmetrics;
pub mod flowwarp;
pub mod image;
pub mod io;
pub mod latentspace;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod seeds;
pub mod synthgen;
pub mod train;
pub mod tryondiffusion;

pub use error::{Error, Result};
pub use image::{Mask, Raster};
