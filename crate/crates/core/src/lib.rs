//! Latent-reasoning policy optimization on a synthetic modular-arithmetic task.
//!
//! The crate bundles a small reverse-mode autodiff engine, a tiny GRU policy
//! that can feed probability-weighted "latent" embeddings back into itself,
//! surrogate likelihoods for those latent steps, group-relative advantage
//! estimation and a training loop with deterministic checkpoints.

pub mod advantage;
pub mod autodiff;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod policy;
pub mod rng;
pub mod surrogate;
pub mod task;
pub mod trainer;
pub mod verify;
pub mod warmup;

pub use error::{Error, Result};
