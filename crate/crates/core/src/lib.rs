//! Manifold-regularized masked autoencoder pretraining for small vision
//! transformers, with the evaluation protocol used to judge the learned
//! representations.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod manifold_reg;
pub mod model;
pub mod objectives;
pub mod registry;
pub mod rng;
pub mod train;

pub use error::{MagmaError, Result};
