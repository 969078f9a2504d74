//! Rehearsal-free continual learning with per-class Gaussian prototypes.
//!
//! Each (domain, class) pair keeps a running mean and covariance. Queries are
//! classified by the smallest Mahalanobis distance under a shrunk,
//! correlation-normalized covariance; several domains can be combined by late
//! fusion of per-domain scores. Unlabeled samples are pseudo-labeled by cosine
//! similarity against a small per-task reference buffer.

// `!(x > y)` is used on purpose so that NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod format;
pub mod ilfr;
pub mod linalg;
pub mod metrics;
pub mod scenario;
pub mod ssl;

#[cfg(feature = "cli")]
pub mod cli;

mod par;

pub use engine::{
    ClassKey, EngineConfig, MergeMode, Prediction, PreparedClassifier, PrototypeStore,
};
pub use linalg::{FVec, MomentPack, SqMat};
