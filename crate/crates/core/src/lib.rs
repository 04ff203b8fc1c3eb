//! Budget-constrained search for sparse parameter-efficient tuning structures
//! over a small frozen encoder-decoder transformer.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod gating;
pub mod harness;
pub mod optim;
pub mod pet;
pub mod rng;
pub mod search;
pub mod structure;
pub mod task;
pub mod train;

pub use error::{Error, Result};
