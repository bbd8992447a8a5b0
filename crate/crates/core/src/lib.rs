//! Distributed MPC by primal decomposition of a shared input budget, with a
//! supervision layer that detects and undoes linear falsification of the
//! dual prices agents report.

// `!(x > 0.0)` is used throughout to reject NaN along with nonpositive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coordinator;
pub mod defense;
pub mod error;
pub mod linalg;
pub mod local;
pub mod model;
pub mod qp;
pub mod scenario;
pub mod verify;
