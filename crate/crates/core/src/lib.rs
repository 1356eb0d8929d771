//! Gated Bayesian recurrent filtering.
//!
//! A Kalman-style recursion whose memory, evolution-mismatch and
//! observation-mismatch terms come from small trainable networks, plus the
//! classical filters it is measured against, scenario simulators and a
//! BPTT trainer.

pub mod filters;
pub mod gated;
pub mod json;
pub mod numerics;
pub mod ssm;
pub mod training;

mod error;

pub use error::{Error, Result};
