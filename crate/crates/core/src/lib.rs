//! Desk-scale multi-task learning laboratory built around task-specific
//! sigmoid batch normalization.
//!
//! The crate provides, bottom to top:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff on a
//!   define-by-run tape, plus a finite-difference checking harness;
//! - [`norm`]: the normalization family (BN, sigma-BN, task-specific
//!   variants, and their layer-norm analogues) with per-task running
//!   statistics and pretrained-parameter conversion;
//! - [`model`]: small convolutional/dense multi-task networks with a shared
//!   trunk, selectable sharing mode, and per-task heads;
//! - [`train`]: joint optimization with discriminative learning rates,
//!   delta-m evaluation, and the perturbation/multiplier sweeps;
//! - [`analysis`]: importance matrices, capacity decomposition, task
//!   similarity and clustering, filter specialization, pruning validation,
//!   and gradient-interference measurement;
//! - [`data`]: synthetic multi-task datasets with controllable relatedness,
//!   the noisy-duplicate family, and an IDX digit-corpus ingester;
//! - [`config`], [`checkpoint`], [`report`], [`cli`]: the experiment surface
//!   used by the `tsbn-lab` binary.

pub mod error;
pub mod tensor;

pub mod norm;

pub mod model;

pub mod train;

pub mod analysis;

pub mod data;

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod report;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
