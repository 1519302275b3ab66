//! Numerical laboratory for blow-up of radial semilinear wave equations
//! `u_tt - Δu = |∇u|^p` with small data.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fit;
pub mod functional;
pub mod harness;
pub mod ode;
pub mod odi;
pub mod quad;
pub mod wave;

pub use error::{LabError, Result};
