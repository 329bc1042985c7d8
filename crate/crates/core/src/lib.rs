//! Two-stage recommendation for cold-start items.
//!
//! A new item may be shown to `N = m + n` users. The first `m` are chosen up
//! front, their ratings update the belief about everyone else, and the
//! remaining `n` are chosen greedily from the updated belief. This crate
//! provides the Gaussian belief algebra behind that loop, an exact solver for
//! small instances, the guided exploitation-exploration (GEE) policies and the
//! baselines they are compared against, and an experiment harness for
//! synthetic and MovieLens-100K studies.

pub mod cu_model;
pub mod error;
pub mod exact;
pub mod gaussian;
pub mod harness;
pub mod mf_model;
pub mod policies;
pub mod quadrature;
pub mod ranking;
pub mod seed;

pub use error::{Error, Result};
pub use gaussian::{GaussianBelief, IndexSet};
