//! Acoustic mosquito detection core.
//!
//! Everything here is allocation-only (`no_std` + `alloc`): the MFCC front end,
//! a soft-margin SVM with SMO training and one-vs-one voting, the two-stage
//! detector built on top of them, dataset construction for seeded trials,
//! evaluation metrics, the streaming detector, and crowd-vote aggregation.
//! File formats, networking and the command line live in the `wingbeat` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod crowdsource;
pub mod dataset;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fft;
pub mod pipeline;
pub mod rng;
pub mod stream;
pub mod svm;
pub mod synth;

mod class;

pub use class::ClassId;
pub use error::{Error, Result};
