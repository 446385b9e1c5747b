//! Segmentation loss laboratory.
//!
//! The crate bundles everything needed to study how loss design affects a
//! small binary-segmentation pipeline on single-channel 2D slices:
//!
//! * [`losses`]: an annotation-guided adaptive focal loss that splits each
//!   slice into hard and easy regions from expert/non-expert mask
//!   disagreement, plus standard focal, annotation-guided BCE and Dice
//!   baselines. Every loss has an analytic gradient with respect to logits.
//! * [`model`]: a deterministic encoder-decoder (conv stem, transformer
//!   bottleneck, skip-connected decoder) with deeply supervised side heads,
//!   built on a flat parameter store with hand-written backward passes.
//! * [`metrics`]: Dice coefficient and 95th-percentile Hausdorff distance
//!   with physical pixel spacing.
//! * [`data`]: PNG dataset IO, preprocessing, augmentation and a synthetic
//!   generator that fabricates expert/non-expert mask pairs with controlled
//!   disagreement.
//! * [`trainer`]: mini-batch SGD/Adam training, checkpointing with exact
//!   resume, prediction and per-case evaluation.
//!
//! Batch-level work (per-sample gradients, per-slice evaluation, distance
//! kernels, synthesis) runs on rayon when the default `parallel` feature is
//! enabled and falls back to sequential iteration without it; results are
//! bit-identical either way.

pub mod data;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod par;
pub mod trainer;

pub use grid::{Grid, Mask};
