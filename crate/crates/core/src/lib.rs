//! Nonparametric contextual bandits with bootstrap Thompson sampling and
//! rank-correlation-driven arm filtering.
//!
//! The crate provides:
//!
//! - a contextual bandit that estimates per-arm rewards by resampling an
//!   analytically sized subset of each arm's nearest neighbors and smoothing
//!   the resample with a Nadaraya-Watson kernel estimate ([`kboot`]);
//! - an eligibility-control layer that filters arms through a top-k score
//!   threshold whose k is looked up in a Monte-Carlo leak-risk dictionary
//!   keyed by rank correlation ([`eligibility`]);
//! - baseline policies (disjoint LinUCB, strict top-1, uniform random)
//!   ([`baselines`]);
//! - synthetic and classification-derived bandit environments with a
//!   calibrated eligibility-score simulator ([`envs`]);
//! - a seeded experiment harness with CSV/JSON/SVG outputs ([`harness`]).
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the crate root
//! re-exports `f64` aliases for the common types.

pub mod baselines;
pub mod eligibility;
pub mod envs;
pub mod error;
pub mod harness;
pub mod kboot;
pub mod kernel;
pub mod mathfn;
pub mod neighbors;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Real;

/// Per-arm sample pool storing `f64` contexts and rewards.
pub type ArmPoolF64 = neighbors::ArmPool<f64>;
/// One stored (context, reward) observation at `f64` precision.
pub type SampleRecordF64 = neighbors::SampleRecord<f64>;
/// The bootstrap Thompson sampling bandit at `f64` precision.
pub type KBootF64 = kboot::KBoot<f64>;
