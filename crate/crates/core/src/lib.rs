pub mod checkpoint;
pub mod cli;
pub mod diagnostics;
pub mod encoding;
pub mod error;
pub mod layer;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
