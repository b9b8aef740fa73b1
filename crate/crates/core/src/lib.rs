//! Meta-federated learning over a simulated network of traffic sensors.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`] - a one-hidden-layer classifier with analytic gradients.
//! * [`traffic`] - synthetic per-node traffic streams, non-IID partitioning and
//!   support/query tasks.
//! * [`simnet`] - a virtual clock, message log and cost model for simulated time.
//! * [`controller`] - loss-driven learning-rate control.
//! * [`federation`] - the synchronous round protocol (local training, weighted
//!   aggregation, learning-rate update).
//! * [`meta`] - first-order MAML on top of the round protocol.
//! * [`eval`] - accuracy, response time and the three-way comparison harness.
//! * [`config`] and [`cli`] - experiment configuration and the command-line driver.

pub mod cli;
pub mod config;
pub mod controller;
pub mod error;
pub mod eval;
pub mod federation;
pub mod format;
pub mod meta;
pub mod model;
pub mod rng;
pub mod simnet;
pub mod traffic;

pub use error::{Error, Result};
