//! Robust direction-dependent polarimetric calibration for radio
//! interferometers under compound-Gaussian noise.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord, clippy::large_enum_variant)]

pub mod algebra;
pub mod baselines;
pub mod calib_robust;
pub mod calib_structured;
pub mod crb;
pub mod error;
pub mod gauge;
pub mod harness;
pub mod model;
pub mod noise;

pub use error::{Error, Result};
