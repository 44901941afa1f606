//! Growth and concentration bounds for products of random matrices, with
//! Monte Carlo and exact-enumeration simulators and a verification harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bounds;
pub mod cli;
pub mod config;
pub mod ensembles;
pub mod error;
pub mod matrix;
pub mod presets;
pub mod rng;
pub mod run;
pub mod scenarios;
pub mod schatten;
pub mod serde_ext;
pub mod simulate;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;
