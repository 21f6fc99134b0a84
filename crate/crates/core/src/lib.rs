//! Graph mixture-of-experts with mutual-information logic diversity and a
//! robustness-aware router, plus desk-scale attack simulators and metrics.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod error;
pub mod eval;
pub mod graph;
pub mod logic;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
