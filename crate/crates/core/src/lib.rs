pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod mask;
pub mod model;
pub mod prompting;
pub mod serve;
pub mod train;

pub use error::{Error, Result};
