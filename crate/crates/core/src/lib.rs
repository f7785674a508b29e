//! A desk-scale laboratory for symmetric multimodal preference optimization.
//!
//! The policy is a log-linear softmax over a small enumerated response
//! catalog, so every log-probability, partition function and gradient is
//! exact. On top of it sit the preference objectives (DPO with an image
//! condition, the vision-oriented contrastive objective and its
//! partition-corrected form, the symmetric pairwise loss, margin consistency
//! and anchored regularization), a synthetic hallucination world, a
//! deterministic trainer and a battery of independent numerical checks.

pub mod cli;
pub mod datagen;
pub mod digest;
pub mod domain;
pub mod error;
pub mod extended;
pub mod matrix;
pub mod numerics;
pub mod objectives;
pub mod partition;
pub mod policy;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use domain::{HyperParams, ImageFeat, Prompt, ResponseId, SymmetricSample, WorldShape};
pub use error::{Error, Result};
pub use matrix::{GradMatrix, Matrix};
pub use objectives::{Component, LossValue, LossWeights};
pub use partition::{GroundTruthReward, PartitionReport};
pub use policy::{FeatureMap, PolicyLayout, PolicyParams};
