pub mod conditioning;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod hexplane;
pub mod metrics;
pub mod nn;
pub mod occgrid;
pub mod vae;

pub use error::{Error, Result};
