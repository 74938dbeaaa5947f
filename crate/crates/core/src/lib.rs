//! Monte Carlo calibration of neural leverage functions for SABR-type local
//! stochastic volatility models.
//!
//! The crate is `no_std` with `alloc`. Enable the `parallel` feature to fan
//! path blocks out over rayon; results are identical either way.

#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod autodiff;
pub mod bs;
pub mod calibrate;
pub mod error;
pub mod exec;
pub mod grid;
pub mod ground_truth;
pub mod hedging;
pub mod lsv;
pub mod math;
pub mod rng;
mod serde_nan;
pub mod stats;

pub use autodiff::{Activation, AdamState, MlpParams, MlpSpec, Tape, Var};
pub use bs::{bs_greeks, bs_price, implied_vol, BsGreeks, OptionSpec};
pub use error::{Error, Result};
