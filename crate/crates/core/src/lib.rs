pub mod cells;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod seeds;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, ErrorKind, Result};
