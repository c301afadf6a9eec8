//! Growing modular and non-modular recurrent rate networks trained on the
//! N-parity curriculum.
//!
//! The library covers the full pipeline: leaky-integrator rate dynamics with
//! trainable per-neuron time constants, module growth with duplication and
//! freezing, N-parity batch generation and evaluation, exact
//! backpropagation-through-time with SGD, and the post-hoc analyses
//! (norm-scaled perturbation robustness, autocorrelation-based effective
//! timescales with AIC model selection, and weight-conservation statistics).
//! The `growrnn` CLI in this workspace drives the experiments.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod parity;
pub mod rng;
pub mod topology;
pub mod trainer;

pub use config::ExperimentConfig;
pub use error::{CoreError, Result};
pub use topology::{Network, NetworkKind};
