//! Safe reinforcement learning on a three-link inverted pendulum.
//!
//! The pipeline: simulate the plant ([`dynamics`]), synthesize an LQR
//! corrective controller ([`corrective`]), label states by closed-loop
//! recovery ([`safety`]), build a training set ([`datagen`]), embed it with
//! t-SNE ([`embedding`]), turn the embedding into a safety hypothesis
//! ([`region`]), learn a policy under that hypothesis ([`srl`]) and estimate
//! the terms of the error bound ([`bounds`]).

pub mod bounds;
pub mod cli;
pub mod config;
pub mod corrective;
pub mod datagen;
pub mod dynamics;
pub mod embedding;
pub mod error;
pub mod region;
pub mod rng;
pub mod safety;
pub mod srl;

pub use error::{Error, Result};
