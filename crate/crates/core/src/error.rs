use alloc::boxed::Box;
use alloc::string::String;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("class `{class}` has {available} samples, {required} required")]
    InsufficientClass {
        class: String,
        available: usize,
        required: usize,
    },
    #[error("ring buffer overflow: {dropped} samples dropped")]
    Overflow { dropped: usize },
    #[error("session is closed")]
    SessionClosed,
    #[error("trial {trial}: {source}")]
    Trial { trial: usize, source: Box<Error> },
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(alloc::format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(alloc::format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use contract;
