pub mod amvur;
pub mod autodiff;
pub mod camera;
pub mod error;
pub mod hand_prior;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod problosses;
pub mod rasterizer;

pub use error::{Error, Result};
