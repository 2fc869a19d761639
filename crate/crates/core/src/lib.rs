pub mod checkpoint;
pub mod error;
pub mod gradsuite;
pub mod image_io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
