//! Learning-rate policy studies for spiking neural networks trained on
//! event-camera data.
//!
//! - [`schedule`]: six epoch-indexed learning-rate policies and the
//!   exploration grid.
//! - [`events`]: event records, a synthetic two-class generator, the binary
//!   dataset container and frame accumulation.
//! - [`snn`]: discrete-time LIF layers trained with surrogate gradients
//!   through time.
//! - [`trainer`]: the epoch loop, the accuracy-stability detector and speedup
//!   reports.
//! - [`carbon`]: training power and CO2e estimates.

pub mod carbon;
pub mod error;
pub mod events;
pub mod rng;
pub mod schedule;
pub mod snn;
pub mod trainer;

pub use error::{Error, Result};
