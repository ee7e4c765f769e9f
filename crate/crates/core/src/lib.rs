//! Federated multifaceted user modeling for click-through-rate prediction.
//!
//! Each simulated client trains a small causal transformer over its own
//! interaction history. Inside every transformer block a gating network routes
//! the user to one of several group-level feed-forward networks, which run
//! alongside a private per-user feed-forward network. The server averages
//! shared parameters globally, averages group networks only over the clients
//! routed to them, and never sees the private parameters.
//!
//! Crate layout:
//!
//! - [`tensor`]: reverse-mode differentiation engine, optimizers, gradient checks
//! - [`model`]: configuration, parameter partitioning, and the forward pass
//! - [`loss`] and [`metrics`]: training objectives, AUC and LogLoss
//! - [`federated`]: rounds, aggregation, upload noise, checkpoints
//! - [`data`]: log ingestion, leave-one-out split, sequences, synthetic data
//! - [`cli`]: experiment configuration, metrics files, and the `mrff` commands
//!
//! Runnable walkthroughs live under `crates/core/examples/`.

pub mod cli;
pub mod data;
pub mod error;
pub mod federated;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
