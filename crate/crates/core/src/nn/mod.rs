//! Minimal reverse-mode differentiable computation layer.

pub mod check;
pub mod layers;
pub mod opt;
pub mod params;
pub mod tape;

pub use check::{grad_check, rel_err};
pub use layers::{mult_attention, Act, FfnParams, FfnSpec, GconvParams, GruParams};
pub use opt::OptState;
pub use params::{load_checkpoint, save_checkpoint, Param, ParamSet, Session};
pub use tape::{Grads, NodeId, Tape};
