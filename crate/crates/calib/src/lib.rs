//! File formats, run configuration and the command line front end for
//! SABR-LSV calibration.

pub mod cli;
pub mod config;
pub mod error;
pub mod extrapolate;
pub mod hash;
pub mod market_io;
pub mod model_io;
pub mod progress;
pub mod report;
pub mod stat;
