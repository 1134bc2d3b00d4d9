//! IO, service and command line on top of `wingbeat_core`.

pub mod audio;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod crowd;
pub mod error;
pub mod fsutil;
pub mod model_io;
pub mod service;
pub mod trials;

pub use error::{Error, Result};
