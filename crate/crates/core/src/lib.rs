pub mod commands;
pub mod error;
pub mod eval;
pub mod generation;
pub mod model;
pub mod tensor;
pub mod text;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
