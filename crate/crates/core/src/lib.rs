//! Calibration toolkit for probabilistic classifiers and deep ensembles.
//!
//! The crate is organised around a small set of data types in [`data`]
//! (prediction sets, logit sets, ensembles and binning schemes) and the
//! pipelines built on them:
//!
//! - [`metrics`]: all-label and top-label calibration errors (ACE, ACCE, ECE,
//!   ECCE), global calibration gaps, accuracy, NLL, the unbiased squared kernel
//!   calibration error and reliability curves.
//! - [`scaling`]: global, per-member and region-dynamic temperature scaling,
//!   fitted by minimising ECE.
//! - [`ensemble`]: weighted combination, pre-/post-combination calibration,
//!   maximum-likelihood and AUC weight estimation, confidence-bound checks.
//! - [`synth`]: synthetic generators with known calibration properties, the
//!   distribution-level evaluator and the ensemble calibration property harness.
//! - [`io`]: CSV and binary prediction files.
//!
//! With the default `parallel` feature, inner loops run on rayon. Every
//! reduction is performed over fixed-size chunks combined in index order, so
//! results are bit-identical for any thread count and for the sequential build.

// `!(x > 0.0)` is used deliberately so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod ensemble;
pub mod error;
pub mod io;
pub mod metrics;
mod par;
pub mod scaling;
pub mod synth;

pub use data::{
    log_probs, softmax, validate, BinningScheme, Ensemble, EnsemblePredictions, LabelBase, LabeledPredictionSet,
    LogitEnsemble, LogitSet, SampleSet, ValidationReport,
};
pub use error::{Error, Result};
