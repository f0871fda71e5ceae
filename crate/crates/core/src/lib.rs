//! Composite outcomes for multi-outcome causal studies built by inversely
//! regressing treatment on outcomes, with robust Wald tests and dual-regime
//! confidence intervals.

// Index loops mirror the matrix algebra; `!(x > 0.0)` also rejects NaN.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod analysis;
pub mod covadj;
pub mod cre;
pub mod dataset;
pub mod design;
pub mod error;
pub mod inference;
pub mod invlogit;
pub mod logistic;
pub mod montecarlo;
pub mod numkernel;
pub mod obs;
pub mod report;
pub mod sre;
pub mod wchi2;

pub use error::{Error, Result};
