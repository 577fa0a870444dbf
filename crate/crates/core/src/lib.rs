//! Handcrafted whole-slide image representations.
//!
//! Patch feature vectors from a reference cohort are clustered into a small
//! set of prototypical patterns ([`prototypes`]). New slides are then projected
//! against those patterns, either by per-pattern weighted average pooling
//! ([`projection`]) or through the spatial layout of pattern assignments
//! ([`pam`]). The resulting representations are evaluated by linear probing
//! ([`evaluation`]) and by isolation-forest anomaly scoring ([`anomaly`]).
//! [`attention`] holds a forward-only multi-head attention reference used to
//! check the correspondence between pooling and attention.

pub mod anomaly;
pub mod attention;
pub mod error;
pub mod evaluation;
pub mod feature_store;
pub(crate) mod linalg;
pub mod pam;
pub mod pipeline;
pub mod projection;
pub mod prototypes;

pub use error::{ErrorClass, H2tError, Result};
