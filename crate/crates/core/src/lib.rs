//! Gapped straight-through gradient estimation for categorical latent
//! variables.
//!
//! The crate bundles a small reverse-mode autodiff tape, the samplers the
//! estimators need, the estimators themselves (GST and its baselines), the
//! expected-gap analysis, an empirical variance profiler and a categorical
//! VAE bench.

pub mod autodiff;
pub mod checks;
pub mod cli;
pub mod estimators;
pub mod gap;
pub mod par;
pub mod samplers;
pub mod stats;
pub mod tensor;
pub mod vae;
pub mod variance;
