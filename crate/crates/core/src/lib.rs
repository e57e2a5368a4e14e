//! Multi-task training on a shared-bottom network with coordinated gradient
//! modification (CoGrad) and baseline gradient strategies.
//!
//! Modules, bottom-up:
//! - [`tensor`]: dense matrices, flattened parameter vectors, finite-difference oracles
//! - [`model`]: shared-bottom network with per-task heads and hand-written backprop
//! - [`data`]: synthetic correlated tasks, CSV ingestion, splits and batching
//! - [`gradmod`]: transference measures and gradient modification strategies
//! - [`trainer`]: the training loop, Adam, AUC/GAUC, prior loss weights, harmonization probe

pub mod data;
pub mod gradmod;
pub mod model;
pub mod tensor;
pub mod trainer;
