//! Joint-embedding predictive pretraining for tabular data.
//!
//! A context encoder sees a random subset of a row's features and, through
//! a predictor, regresses the latent representations that an EMA target
//! encoder assigns to a disjoint subset of features. The crate also carries
//! the preprocessing, representation diagnostics and downstream probes
//! needed to evaluate the learned representations.

pub mod analysis;
pub mod data;
pub mod downstream;
pub mod error;
pub mod masking;
pub mod model;
pub mod numeric;
pub mod par;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use par::Parallelism;
