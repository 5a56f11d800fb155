//! Files, training loop, evaluation and command line for the `segnmt`
//! translation system. The model itself lives in `segnmt_core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod index_file;
pub mod preprocess;
pub mod retrieval;
pub mod text;
pub mod trainer;

pub use error::{Error, Result};
