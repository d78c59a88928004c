//! Library for working with revision-aware epidemiological surveillance
//! data: a vintage store, backfill analytics, sequence clustering, a small
//! reverse-mode autodiff engine, and the refinement model built on top of it.

pub mod analytics;
pub mod baselines;
pub mod dtw;
pub mod error;
pub mod graph;
pub mod model;
pub mod nn;
pub mod predictions;
pub mod signal;
pub mod store;
pub mod synth;
pub mod util;

pub use error::{Error, ErrorKind, Result};
pub use signal::{derive_seed, fnv1a64, SignalId, Week};
