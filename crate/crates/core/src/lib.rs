//! Dataset distillation by trajectory matching over a low-rank image
//! parameterization.
//!
//! A synthetic dataset is stored as a few shared "dimension mapper" pairs
//! (U, Vᵀ) spanning rank-r subspaces, plus one cheap r×r basis block per
//! synthetic image and a trainable soft-label row per image. The whole
//! parameterization is optimized by unrolling student SGD steps on the
//! synthesized images and matching the resulting parameters against
//! precomputed expert trajectories.

pub mod augment;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod expert;
pub mod export;
pub mod labels;
pub mod lowrank;
pub mod matcher;
pub mod models;
pub mod nn;
pub mod schedule;
pub mod tape;

pub use error::{Error, Result};
