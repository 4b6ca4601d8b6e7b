pub mod cli;
pub mod data;
pub mod encoding;
pub mod error;
pub mod experiments;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod real;
pub mod renderer;
pub mod training;

pub use error::{Error, Result};
