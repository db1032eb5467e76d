//! File formats, run configuration and orchestration for `mgl-core`.

pub mod config;
pub mod io;
pub mod runner;

pub use mgl_core as core;
