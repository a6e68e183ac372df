//! Unpaired two-site image harmonization with cycle-consistent least-squares
//! adversarial networks, regression-based correction baselines, and a
//! PCA + kernel-SVM evaluation harness.

pub mod classify;
pub mod corrections;
pub mod cyclegan;
pub mod data;
pub mod error;
pub mod ndtensor;
pub mod nets;
pub mod rng;

pub use error::{Error, Result};
