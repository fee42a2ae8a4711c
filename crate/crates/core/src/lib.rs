mod binio;
pub mod diagnostics;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod layers;
pub mod losses;
pub mod numerics;
pub mod synthdata;
pub mod trainer;

pub use error::{DataError, Error, NumericsError, Result};
pub use numerics::{AdamConfig, AdamState, NodeId, Tape, Tensor};
