//! Straggler-aware coordination for data-parallel SGD.
//!
//! The crate models a parameter server training a convex workload under four
//! worker-coordination schemes (BSP, ASP, SSP and load-balanced BSP), sizes
//! per-worker batches so that heterogeneous workers finish together, predicts
//! worker speeds online, and runs everything inside a deterministic simulator.

// Negated float comparisons are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod coordination;
pub mod error;
pub mod metrics;
pub mod predictor;
pub mod sgd;
pub mod sim;
pub mod sizer;
pub mod trace;

pub use error::{Error, Result};
