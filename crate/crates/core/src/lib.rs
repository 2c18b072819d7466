//! Last-layer Hamiltonian Monte Carlo for neural classifiers: backbone
//! training, feature extraction, NUTS over the output layer, baselines,
//! uncertainty metrics and an experiment harness.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod toydata;

pub use error::{Error, Result};
