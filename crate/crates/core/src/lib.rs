pub mod backend;
pub mod blend;
pub mod config;
pub mod consensus;
pub mod error;
pub mod features;
pub mod pipeline;
pub mod pool;
pub mod raster;
pub mod sampler;
pub mod seed;
pub mod selfcheck;
pub mod segmenter;
pub mod superpixel;
pub mod toy;

pub use error::{Error, Result};
