//! Simulation and large-deviation analysis of small-noise stochastic
//! functional differential equations with infinite fading memory.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod fading_memory;
pub mod ldp;
pub mod model;
pub mod optim;
pub mod pullback;
pub mod rate;
pub mod rng;
pub mod runner;
pub mod scenarios;
pub mod simulate;
pub mod stats;

pub use error::{FadeError, Result};
