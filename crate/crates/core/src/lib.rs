//! Bayesian inference for stochastic differential equation mixed-effects
//! models (SDEMEMs).
//!
//! The crate is `no_std` (with `alloc`). Enable the `parallel` feature to
//! spread per-subject work over a rayon thread pool.

#![no_std]

extern crate alloc;

pub mod data;
pub mod math;
pub mod model;
pub mod pfilter;
pub mod relik;
pub mod rng;
pub mod samplers;
pub mod sdesim;
pub mod tunediag;

use alloc::string::String;
use alloc::vec::Vec;

pub use data::{Dataset, Subject};
pub use model::{builtin_model, ModelSpec, Sdemem, Theta};
pub use pfilter::{FilterConfig, ResampleScheme};
pub use rng::{RngBlockStore, Stream};
pub use sdesim::{Proposal, TimeGrid};

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at time {time}")]
    NonFinite { what: &'static str, time: f64 },
    #[error("all particle weights are zero")]
    WeightCollapse,
    #[error("chain column `{column}` is constant")]
    Degenerate { column: String },
    #[error("tuning failed: {0}")]
    Tuning(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Wall-clock source, in seconds from an arbitrary origin.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// A clock that never advances.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Evaluates `f` for every subject index, in parallel when enabled.
pub(crate) fn map_subjects<T, F>(m: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..m).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..m).map(f).collect()
    }
}
