//! Saliency explanations with uncertainty, and randomization sanity checks
//! for the combinations of uncertainty-quantification and explanation
//! methods that produce them.
//!
//! The crate builds small neural models from scratch (dense, conv, ReLU,
//! dropout, dropconnect, flipout layers), wraps them in stochastic
//! predictors (MC-Dropout, MC-DropConnect, Flipout, Deep Ensembles),
//! computes saliency explanations (Guided Backpropagation, Integrated
//! Gradients, LIME for tabular data) with per-pixel/per-feature mean,
//! standard deviation and coefficient of variation across posterior
//! samples, and subjects each UQ × explainer combination to two sanity
//! checks:
//!
//! * **weight randomization** — layers are cumulatively reinitialized from
//!   the input side; explanation similarity to the trained baseline (SSIM
//!   for images) should fall and explanation uncertainty should rise;
//! * **data randomization** — a twin model trained on permuted/random
//!   labels should produce less similar, more uncertain explanations than
//!   the properly trained model.
//!
//! Everything is seeded and deterministic: rerunning an experiment with an
//! identical config reproduces byte-identical reports.

pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod fsutil;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod report;
pub mod rng;
pub mod runner;
pub mod sanity;
pub mod tensor;
pub mod uq;

pub use error::{Error, Result};
pub use tensor::Tensor;
