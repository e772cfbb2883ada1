//! Latent-variable co-kriging with separable Gaussian processes for
//! quality-flagged gridded data.
//!
//! Cells are indexed spatial-major: cell `(i, j)` of a grid with `n_p`
//! pressure levels lives at `i * n_p + j`.

pub mod baseline;
pub mod chain;
pub mod cli;
pub mod config;
pub mod dense;
pub mod error;
pub mod experiment;
pub mod io;
pub mod kernels;
pub mod kron;
pub mod metrics;
pub mod model;
pub mod par;
pub mod predict;
pub mod sampler;
pub mod simulate;

pub use error::{Error, Result};
