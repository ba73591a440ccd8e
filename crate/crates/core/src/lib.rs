//! Decoupled entropy-minimization toolkit.
//!
//! Exact values and analytic gradients for classical entropy minimization and
//! its decoupled family (CADF, GMC, DEM, AdaDEM), together with the pieces
//! needed to exercise them end to end: small manually-differentiated
//! classifiers, synthetic distribution-shift streams, diagnostics and a
//! hyperparameter grid search.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the CLI and
//! thread-level parallelism live in the `demkit-std` companion crate.
#![no_std]
#![forbid(unsafe_code)]
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adadem;
pub mod bench;
mod error;
pub mod losses;
pub mod model;
pub mod numkit;
pub mod search;

pub use error::{Error, Result};
