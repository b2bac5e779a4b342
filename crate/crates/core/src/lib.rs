pub mod checkpoint;
pub mod controllers;
pub mod encoders;
pub mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod mv_unet;
pub mod nn;
pub mod pipeline;
pub mod prompting;
pub mod sds_nerf;
pub mod seed;

pub use error::{Error, Result};
