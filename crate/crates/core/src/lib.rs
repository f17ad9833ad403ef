//! Conformal calibration of pixel-level class-probability maps.
//!
//! The crate turns per-pixel class probabilities from any segmentation model
//! into calibrated prediction sets and pseudo-label masks, audits their
//! coverage, and drives a small two-stage self-training loop on synthetic
//! data.

pub mod audit;
pub mod calibrate;
pub mod cli;
pub mod error;
pub mod kmeans;
pub mod maskgen;
pub mod nonconformity;
pub mod pipeline;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod toytrain;

pub use error::{Error, Result};
pub use tensor::{
    CalibratedMask, FeatureImage, LabelMap, ProbabilityMap, QuantileField, ScoreMap, Variant,
    IGNORE,
};
