//! Learning maximally monotone operators through graph distances.
//!
//! The crate is `no_std` and only needs `alloc`. It covers discretized L²
//! spaces, target operators with their resolvents and Yosida approximations,
//! local and soft graph distances, synthetic data generation, a small
//! reverse-mode autodiff tape, encoder–decoder and structured resolvent
//! models, training, evaluation metrics, and numerical verifiers.
#![cfg_attr(not(test), no_std)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod datagen;
pub mod error;
pub mod graphdist;
pub mod hilbert;
pub mod metrics;
pub mod model;
pub mod operators;
pub mod rng;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
