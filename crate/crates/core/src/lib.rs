//! Bitemporal change detection with region-level style removal.
//!
//! The crate bundles a small reverse-mode tensor engine, the normalization
//! and whitening layers that strip local channel statistics from features,
//! a region-statistic style transplant used for augmentation, a siamese
//! difference network with its losses, a synthetic bitemporal benchmark and
//! the training loop.

pub mod autodiff;
pub mod ctst;
pub mod data;
pub mod ddr;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod losses;
pub mod network;
pub mod real;
pub mod stats;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
