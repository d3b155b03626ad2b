pub mod batch;
pub mod cli;
pub mod egnn;
pub mod error;
pub mod gradcheck;
pub mod kb;
pub mod lgraph;
pub mod story;
pub mod train;

pub use error::{Error, Result};
