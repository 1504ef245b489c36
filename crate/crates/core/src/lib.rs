//! Variational latent Gaussian process inference for spike trains.

pub mod cli;
pub mod error;
pub mod evaluate;
pub mod gp_prior;
pub mod inference;
pub mod init;
pub mod io;
pub mod model;
pub mod simulate;

pub use error::{Error, Result};
