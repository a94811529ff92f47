pub mod cli;
pub mod error;
pub mod losses;
pub mod metrics_io;
pub mod netcore;
pub mod problems;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
