pub mod bitalloc;
pub mod codec;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod neural;
pub mod rng;
pub mod synth;

pub use error::{Error, FormatError, Result};
