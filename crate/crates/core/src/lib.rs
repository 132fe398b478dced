//! Selective state-space sequential recommender with test-time alignment.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] and [`autograd`]: float64 matrices and a reverse-mode tape
//!   with fused scan, convolution and normalization primitives.
//! - [`ingest`]: interaction loading, filtering, leave-one-out splitting,
//!   batching and a synthetic interest-shift generator.
//! - [`model`]: embedding, transform, discretization, selective scan, FFN and
//!   prediction head, plus binary checkpoints.
//! - [`losses`]: recommendation cross-entropy, time-interval alignment,
//!   interest-state alignment and the analytic bound on the latter.
//! - [`optim`]: Adam, parameter snapshots and early stopping.
//! - [`adapt`]: per-batch test-time alignment with exact restore.
//! - [`eval`]: ranking metrics, segment analysis and throughput.
//! - [`config`], [`train`] and [`cli`]: run configuration and commands.

pub mod adapt;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod losses;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamMap, Tensor};
