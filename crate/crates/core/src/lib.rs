//! Layer-contrastive decoding with logit extrapolation.
//!
//! The pipeline per decode step: early-exit logits for every layer
//! ([`model`]), an optional extrapolation of the final-layer distribution
//! ([`extrapolate`]), choice of a lower contrasting layer ([`select`]), and
//! the masked log-ratio scores ([`contrast`]). [`harness`] drives generation,
//! multiple-choice scoring, layer analysis and sweeps.

pub mod contrast;
pub mod decode;
pub mod error;
pub mod extrapolate;
pub mod harness;
pub mod model;
pub mod numkit;
pub mod select;

pub use error::{Error, Result};
