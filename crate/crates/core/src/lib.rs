//! Simulator and solver library for split federated LoRA fine-tuning over a
//! shared FDMA uplink.
//!
//! The crate is organised bottom-up:
//!
//! * [`channel`] - device deployment, block fading, FDMA rates and delays.
//! * [`lambert`] - the branch `-1` Lambert-W function.
//! * [`allocation`] - per-device bandwidth for a target delay and the
//!   minimum common delay of a scheduled set.
//! * [`scheduler`] - the delay virtual queue, the drift-plus-penalty
//!   objective, the set-expansion online policy and the benchmark policies.
//! * [`fedft`] - a desk-scale split model (frozen embedding and encoder,
//!   low-rank adapter, per-device heads) and the per-round training protocol.
//! * [`bound`] - the convergence-bound recursion and its numerical checks.
//! * [`harness`] - experiment configs, runs, sweeps, CSV metrics and comparison.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocation;
pub mod bound;
pub mod channel;
pub mod error;
pub mod fedft;
pub mod harness;
pub mod lambert;
pub mod scheduler;

pub use error::{Error, Result};
