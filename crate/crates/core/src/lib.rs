//! Desk-scale laboratory for adaptive feature caching in diffusion
//! transformers.
//!
//! The crate wires together five pieces:
//!
//! - [`numerics`]: deterministic PRNG, dense 2-D tensors, and the
//!   statistics/quality metrics everything else reports.
//! - [`toydit`]: a seeded toy diffusion transformer whose forward pass can be
//!   split into a shallow probe (first `m` blocks) and a resume
//!   (blocks `m+1..M`) that composes bit-exactly with the full pass.
//! - [`sampler`]: a flow-matching Euler sampler generic over a per-step
//!   velocity provider, with block-evaluation cost metering.
//! - [`cachepolicy`]: the adaptive caching engine (probe-profiled reuse
//!   decisions plus trajectory-aligned cache combination) and the baseline
//!   policies it is compared against.
//! - [`trace`]: bit-exact feature traces of vanilla runs, open-loop schedule
//!   replay, and the correlation analyses that justify shallow probes.
//!
//! Everything is deterministic given seeds: same configuration, same bytes,
//! on any platform, with or without the `parallel` feature.

pub mod cachepolicy;
pub mod error;
pub mod numerics;
pub mod sampler;
pub mod toydit;
pub mod trace;

mod parallel;

pub use error::{Error, Result};
