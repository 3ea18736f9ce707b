//! Federated adversarial representation learning.
//!
//! The crate implements the full desk-scale pipeline for training a shared
//! feature extractor across simulated devices while an attribute-inference
//! head and a utility critic pull it in opposite directions:
//!
//! * [`nn`] / [`tape`] — a small dense-network engine with reverse-mode
//!   gradients, plain SGD, and deterministic init.
//! * [`objectives`] — the cross-entropy privacy surrogate, the
//!   Jensen-Shannon mutual-information estimate, and the per-device
//!   combination of the two.
//! * [`trainer`] — local device updates over (features, attribute) shards.
//! * [`fl`] — server state, device sampling, federated averaging, and the
//!   round loop.
//! * [`defense`] — upload-side baseline defenses (DP noise, magnitude
//!   pruning).
//! * [`eval`] — post-hoc attribute-inference attacks and utility probes on
//!   frozen representations.
//! * [`theory`] — executable checks of the analytic privacy/utility bounds
//!   on discrete joints.
//! * [`data`] — synthetic data generation and device partitioning.
//! * [`checkpoint`] — a line-oriented text format for parameter tensors.
//!
//! Everything is deterministic given a root seed: per-device, per-round RNG
//! streams are derived in [`rng`], so sequential and parallel schedules of
//! the same experiment produce bit-identical results.
//!
//! The crate is `no_std`-compatible (requires `alloc`); the default `std`
//! feature only switches float math from `libm` to the host intrinsics.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod fl;
mod fmath;
pub mod nn;
pub mod objectives;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
