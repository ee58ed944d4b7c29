//! Kriging surrogate modelling and Expected-Improvement driven sequential
//! design of experiments.
//!
//! The crate fits Gaussian-process (Kriging) surrogates to scattered
//! observations, proposes new evaluation points by maximizing Expected
//! Improvement one at a time or in batches, validates surrogates by
//! leave-one-out cross-validation, and interpolates pump flow-rate curves.

pub mod kernel;
pub mod kriging;
mod local_search;
pub mod numerics;
pub mod design;
pub mod acquisition;
pub mod ego;
pub mod benchfn;
pub mod diagnostics;
pub mod flowrate;
pub mod cli;
