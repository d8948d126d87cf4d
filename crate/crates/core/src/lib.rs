//! Distribution-aware speckle-to-image reconstruction at desk scale.
//!
//! This crate bundles everything needed to reproduce a multimode-fiber
//! imaging experiment end to end on a single machine:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine (dense tensors, a
//!   define-by-run tape, Adam, and finite-difference gradient checking),
//!   generic over `f32`/`f64`.
//! * [`speckle`] — a transmission-matrix simulator that turns binary-ish
//!   label images into fully developed speckle intensity patterns.
//! * [`hcu`] — differentiable smooth histograms: Gaussian kernel weight
//!   fields, marginal and joint histograms, and their reporting types.
//! * [`losses`] — mutual-information, multiscale structural-similarity, and
//!   adversarial losses, plus the total generator objective.
//! * [`networks`] — the refined U-Net generator with three sigmoid output
//!   scales and the conditional patch discriminator.
//! * [`data`] — dataset synthesis and the on-disk formats (dataset
//!   containers, checkpoints, a NumPy reader subset, PGM, CSV).
//! * [`trainer`] — training loops, evaluation, and histogram reports.
//! * [`config`] — the layered run configuration shared by the CLI.
//!
//! Determinism is a design requirement: given the same seed, configuration,
//! and build, every byte of output (checkpoints, metrics, reports) is
//! reproducible.

pub mod error;
pub mod hcu;
pub mod image;
pub mod config;
pub mod data;
pub mod losses;
pub mod networks;
pub mod speckle;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
