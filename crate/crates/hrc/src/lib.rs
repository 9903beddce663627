//! Intent-driven human-robot collaboration at desk scale.
//!
//! The crate bundles everything needed to study collaboration between a
//! point-mass robot and a scripted human partner, end to end:
//!
//! * [`numerics`] — an f64 tensor type with tape-based reverse-mode
//!   gradients, parameter storage, Adam, and checkpointing.
//! * [`encoders`] — per-modality encoders (robot state, force, vision
//!   with FiLM conditioning, hashed-embedding text) mapping raw inputs to
//!   tokens of a common width.
//! * [`intent`] — the CVAE human intent estimator: past/future encoders,
//!   future-past cross attention, latent sampling, trajectory decoding,
//!   and the weighted ELBO loss.
//! * [`policy`] — the multimodal transformer trunk with a learnable
//!   action token, MLP action head, action chunking, and behavior cloning.
//! * [`controller`] — the two-rate hierarchy: 10 Hz setpoints driving a
//!   100 Hz impedance law.
//! * [`sim`] — the synthetic environment: scenarios, a scripted human
//!   force model, occupancy rendering, demonstration generation, and
//!   closed-loop rollouts.
//! * [`mode`] — collaboration-mode inference (pHRI vs remote) with
//!   force hysteresis.
//! * [`metrics`] — the quantitative evaluation suite (pHRI angle,
//!   assistance index, mutual-assistance time, mechanical work,
//!   prediction errors, success rates).
//! * [`commands`] — the orchestration layer behind the `hrc` binary
//!   (`gen`, `train`, `eval`, `replay`).
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod commands;
pub mod config;
pub mod controller;
pub mod encoders;
pub mod error;
pub mod intent;
pub mod metrics;
pub mod mode;
pub mod model;
pub mod numerics;
pub mod policy;
pub mod sim;
pub mod svg;
pub mod train;

pub use config::RunConfig;
pub use error::{Error, Result};
