pub mod conditioning;
pub mod decoding;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod mixture;
pub mod model;
pub mod par;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
