//! Censored sampling of diffusion models from binary feedback.
//!
//! The crate is a small laboratory: analytic Gaussian-mixture "data
//! distributions" stand in for a pre-trained generator, tiny MLP reward
//! models are trained from a handful of labels, and reward-guided reverse
//! VP-SDE samplers suppress the samples a labeler marked as malign. Because
//! the worlds are analytic, almost every quantity has an exact oracle.
//!
//! Module map:
//! - [`schedule`]: VP noise schedule, closed-form marginals, discrete grid.
//! - [`mixture`]: labeled mixture worlds, exact scores/rewards, grid oracle.
//! - [`nn`]: MLP with reverse-mode gradients, weighted BCE, AdamW training.
//! - [`reward`]: feedback buffers, ensembles, imitation-learning rounds.
//! - [`sampler`]: unguided/guided ancestral samplers, backward guidance,
//!   recurrence, rejection sampling.
//! - [`metrics`]: malign fraction, mode occupancy, arm comparison tables.

pub mod error;
pub mod metrics;
pub mod mixture;
pub mod nn;
pub mod reward;
pub mod rng;
pub mod sampler;
pub mod schedule;

pub use error::{Error, Result};
