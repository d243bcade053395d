// SPDX-License-Identifier: Apache-2.0

//! Label-efficient semantic segmentation of LiDAR scans in adverse weather.
//!
//! The crate trains a per-point classifier in three stages:
//!
//! - **Stage zero** fits a base model on good-weather scans (base classes only).
//! - **Stage one** extends the head with the weather-noise classes and fine-tunes on
//!   `K` labeled adverse scans, adding a pseudo-label term on unlabeled adverse scans
//!   once the model clears a pseudo-validation threshold.
//! - **Stage two** restarts from the base model and combines the few-shot term,
//!   distillation towards the base model, and polar-mixed pairs of pseudo-labeled
//!   adverse scans with labeled good-weather scans.
//!
//! Checkpoints are selected on pseudo-validation sets built only from the labeled
//! shots (and, in stage two, good-weather scans).

pub mod augment;
pub mod cli;
pub mod config;
pub mod error;
pub mod geom;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pcio;
pub mod pipeline;
pub mod schema;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
