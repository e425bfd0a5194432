//! Near-field XL-MIMO cell-free uplink simulator with from-scratch MADDPG
//! agents for antenna selection and power control.

// Range checks are written as `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Index loops mirror the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod channel;
pub mod error;
pub mod geometry;
pub mod marl;
pub mod signal;
pub mod tasks;

pub use error::{Error, Result};
