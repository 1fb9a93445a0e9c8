//! Federated meta-learning for small devices.
//!
//! Clients hold a tiny dense network split into global weights, which are
//! shared with a server, and local weights, which are rebuilt on the device
//! each round from a support stream and never leave it. After updating the
//! global weights on a query stream, a client sends back only the Top-P% of
//! global coordinates that moved the most. The server folds each update in
//! with a cosine-annealed interpolation rate.
//!
//! Module map:
//!
//! - [`nn`]: dense network, manual backprop, online SGD, weight blobs.
//! - [`partition`]: global/local weight masks.
//! - [`tasks`]: sine and synthetic classification task families, episodes.
//! - [`schedule`]: server interpolation-rate schedule.
//! - [`sparse`], [`wire`]: Top-P% deltas and the TMF1 message format.
//! - [`meta`]: client/server procedures, baselines, evaluation.
//! - [`transport`]: in-process simulator and TCP service.
//! - [`harness`]: experiment configs, runs, CSV output and comparison.

pub mod error;
pub mod harness;
pub mod meta;
pub mod nn;
pub mod partition;
pub mod schedule;
pub mod seed;
pub mod sparse;
pub mod tasks;
pub mod transport;
pub mod wire;

pub use error::{Error, Result};
