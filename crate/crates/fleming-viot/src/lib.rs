//! Mean-field particle approximation of normalized Feynman-Kac flows:
//! exact finite-state oracles, the two selection kernels, the N-particle
//! engine, and the estimators used to measure propagation-of-chaos
//! rates and time-uniform concentration.

pub mod config;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod io;
pub mod kernels;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
