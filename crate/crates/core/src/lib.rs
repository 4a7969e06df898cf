//! Learning with privileged transcriptomic information for bag-of-patch
//! slide models.
//!
//! Training pairs each case's patch-feature bag with a pathway-grouped
//! expression profile. A privileged branch attends over patches with
//! expression-derived pathway queries; a distilled branch regresses
//! pseudo-pathway queries from the image alone and is aligned to the
//! privileged branch. Inference, evaluation and attribution use only the
//! distilled branch.

pub mod config;
pub mod datamodel;
pub mod error;
pub mod gradsuite;
pub mod interpret;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
