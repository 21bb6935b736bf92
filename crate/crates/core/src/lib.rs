//! Sieve analysis of vaccine-trial endpoints with deep-sequenced viral marks.

pub mod classify;
pub mod cli;
pub mod cox;
pub mod data;
pub mod deconvolve;
pub mod design;
pub mod error;
pub mod inference;
pub mod missingness;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod simulate;

pub use error::{Result, SieveError, Warning};
