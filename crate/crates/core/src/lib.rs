//! Routing networks: a trainable router composes trainable function
//! modules per sample, trained jointly with reinforcement learning or
//! stochastic reparameterization.

pub mod bank;
pub mod bench;
pub mod engine;
pub mod error;
pub mod lab;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
