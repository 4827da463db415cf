//! Experiment runner for learning-rate policy studies on spiking networks.

pub mod commands;
pub mod config;
