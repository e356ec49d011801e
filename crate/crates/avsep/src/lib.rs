//! Time-domain audio-visual target speaker extraction.
//!
//! The crate trains and runs a mask-based extraction network that separates
//! one or more target speakers from a single-channel mixture, conditioned on
//! per-speaker visual streams. A cross-speaker attention block lets the
//! per-speaker extraction branches exchange information once per processing
//! stage; speakers whose visual stream is missing bypass that block
//! untouched, so the same weights serve any subset of visible speakers.
//!
//! Layout:
//! - [`tensor`]: reverse-mode autodiff on dense row-major tensors.
//! - [`io`]: wav / feature / manifest / checkpoint / config formats.
//!
//! Everything is deterministic given a seed and runs single-threaded on CPU.

pub mod codec;
pub mod error;
pub mod gradsuite;
pub mod io;
pub mod metrics;
pub mod mixsim;
pub mod model;
pub mod tensor;
pub mod train;
pub mod visual;

pub use error::{Error, Result};
