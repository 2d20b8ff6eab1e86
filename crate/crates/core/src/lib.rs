pub mod analytics;
pub mod cli;
pub mod config;
pub mod error;
pub mod mamoe;
pub mod model;
pub mod numkit;
pub mod stream;
pub mod trainer;

pub use error::{CheckpointError, Error, Result};
