//! Patch-based semi-supervised classification toolkit.
//!
//! High-resolution images are tiled into a uniform grid of patches, a
//! feature-matching semi-supervised GAN (and a supervised ConvNet baseline)
//! is trained on the patches, and per-patch predictions are aggregated into
//! image-level abnormality scores. Heatmap overlays make the predictions
//! interpretable.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`dataset`]: image ingestion, normalization, tiling, patch labeling,
//!   splits, labeled-subset sampling, and a synthetic sparse-lesion
//!   dataset generator for desk-scale experiments.
//! - [`nn`]: a small CPU tensor-network layer library (weight-normalized
//!   convolutions, transposed convolutions, batch norm, dropout) with
//!   hand-written backward passes.
//! - [`model`]: the generator, the K-class discriminator shared with the
//!   ConvNet baseline, and the three training losses.
//! - [`training`]: the alternating ADAM training loops, EMA shadow
//!   weights, LR schedule, augmentation, and run-directory persistence.
//! - [`evaluation`]: patch/image ROC-AUC, threshold selection, and the
//!   labeled-count-by-repeats experiment harness.
//! - [`overlay`]: abnormality heatmaps and localization scoring.
//! - [`cli`]: the `patchssl` command-line entry points.
//!
//! See the `examples/` directory for one runnable example per capability.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod overlay;
pub mod seeds;
pub mod training;

pub use error::{Error, Result};
