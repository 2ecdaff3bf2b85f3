pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
