//! Capsule-based adversarial background reconstruction for hyperspectral
//! anomaly detection, trained continually over a stream of scenes.
//!
//! The pipeline runs in stages:
//!
//! * [`hsi_data`] loads, synthesizes, normalizes and PCA-unifies cubes.
//! * [`preprocess`] builds the coarse background mask and the
//!   spectral-spatial feature vectors, splitting pixels into background and
//!   anomaly-candidate sets.
//! * [`grad_core`] is the small reverse-mode engine the networks train on.
//! * [`capsule_nn`] defines the capsule generator and multiscale capsule
//!   discriminator, squashing, dynamic routing and color augmentation.
//! * [`replay`] clusters background samples and keeps the exemplar buffer.
//! * [`train`] assembles the losses and runs single-task and continual training.
//! * [`detect_eval`] turns reconstruction error into detection maps and
//!   computes 3D-ROC AUC measures plus ACC/BWT.

pub mod capsule_nn;
pub mod detect_eval;
pub mod error;
pub mod grad_core;
pub mod hsi_data;
pub mod preprocess;
pub mod replay;
pub mod train;

mod binio;

pub use error::{Error, Result};
